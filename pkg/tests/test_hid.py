import math
import random
from fractions import Fraction

import pytest

from usbwarden.hid import (
    AUTHORIZED_MESSAGE,
    BLOCKED_MESSAGE,
    CODE_LENGTH,
    GRID_POSITIONS,
    KEYBOARD_ALPHABET,
    KEYBOARD_RETRY,
    KEYBOARD_SPACE,
    KeyboardAuth,
    KeyboardChallenge,
    MOUSE_SPACE,
    MouseAuth,
    Feedback,
    Status,
    TARGET_RADIUS,
    admissible_second_positions,
    attack_success_probability,
    gen_keyboard_challenge,
    gen_mouse_challenge,
    target_center,
)

KEYBOARD_BLOCKED_TEXT = (
    "*** Authorization failed ***\n"
    "Device claims to be a keyboard.\n"
    "Is it true? Is the device malicious?\n"
    "To check it again, re-attach it."
)


def keyboard_with_code(code: str) -> KeyboardAuth:
    auth = KeyboardAuth(random.Random(0))
    auth.challenge = KeyboardChallenge(code)
    return auth


class TestKeyboardChallenge:
    def test_seeded_generation_is_deterministic(self):
        a = gen_keyboard_challenge(random.Random(11))
        b = gen_keyboard_challenge(random.Random(11))
        assert a == b
        assert len(a.code) == CODE_LENGTH
        assert all(ch in KEYBOARD_ALPHABET for ch in a.code)

    def test_per_position_frequencies_within_3_sigma(self):
        n = 100_000
        rng = random.Random(3)
        counts = [[0] * 36 for _ in range(CODE_LENGTH)]
        for _ in range(n):
            for pos, ch in enumerate(gen_keyboard_challenge(rng).code):
                counts[pos][KEYBOARD_ALPHABET.index(ch)] += 1
        expected = n / 36
        sigma = math.sqrt(n * (1 / 36) * (35 / 36))
        for row in counts:
            for count in row:
                assert abs(count - expected) <= 3 * sigma


class TestKeyboardMachine:
    def test_paper_style_code_authorizes(self):
        auth = keyboard_with_code("7E5N3")
        feedback = [auth.submit_key(ch) for ch in "7E5N3"]
        assert feedback == [Feedback.ELEMENT_OK] * 4 + [Feedback.AUTHORIZED]
        assert auth.status is Status.AUTHORIZED
        assert auth.display_text == AUTHORIZED_MESSAGE

    def test_case_insensitive(self):
        auth = keyboard_with_code("AB2CD")
        for ch in "ab2cd":
            auth.submit_key(ch)
        assert auth.status is Status.AUTHORIZED

    def test_three_wrong_first_symbols_block(self):
        auth = keyboard_with_code("AAAAA")
        assert auth.submit_key("*") is Feedback.RESTARTED
        assert auth.submit_key("*") is Feedback.RESTARTED
        assert auth.submit_key("*") is Feedback.BLOCKED
        assert auth.status is Status.BLOCKED
        assert auth.attempts_used == 3
        assert auth.display_text == KEYBOARD_BLOCKED_TEXT

    def test_late_mismatch_restarts_whole_code(self):
        auth = keyboard_with_code("QW3RT")
        for ch in "QW3R":
            assert auth.submit_key(ch) is Feedback.ELEMENT_OK
        assert auth.submit_key("X") is Feedback.RESTARTED
        assert auth.attempts_used == 1
        assert auth.element_index == 0
        assert auth.status is Status.IN_PROGRESS
        # retry shows the verbatim message with a freshly generated code
        assert auth.display_text == KEYBOARD_RETRY.format(code=auth.challenge.code)

    def test_retry_display_is_independent_of_mismatch_position(self):
        texts = set()
        for wrong_at in range(CODE_LENGTH):
            auth = keyboard_with_code("ZZZZZ")
            for _ in range(wrong_at):
                auth.submit_key("Z")
            auth.submit_key("*")
            texts.add(auth.display_text.replace(auth.challenge.code, "<CODE>"))
        assert len(texts) == 1

    def test_input_after_blocked_is_ignored(self):
        auth = keyboard_with_code("AAAAA")
        for _ in range(3):
            auth.submit_key("*")
        before = (auth.status, auth.attempts_used, auth.display_text)
        assert auth.submit_key("A") is Feedback.IGNORED
        assert (auth.status, auth.attempts_used, auth.display_text) == before


class TestMouseGeometry:
    def test_targets_cannot_overlap(self):
        centers = [target_center(p) for p in range(GRID_POSITIONS)]
        for i, a in enumerate(centers):
            for b in centers[i + 1 :]:
                assert math.dist(a, b) >= 2 * TARGET_RADIUS

    def test_admissible_counts_by_exact_enumeration(self):
        for first in range(GRID_POSITIONS):
            assert len(admissible_second_positions(first, 0)) == 11
            assert len(admissible_second_positions(first, 1)) == 17
            assert len(admissible_second_positions(first, 2)) == 17

    def test_generated_pairs_honor_admissible_sets(self):
        rng = random.Random(7)
        for _ in range(200):
            challenge = gen_mouse_challenge(rng)
            for k, pair in enumerate(challenge.pairs):
                assert pair.second in admissible_second_positions(pair.first, k)

    def test_message_rows_never_cover_the_first_target(self):
        from usbwarden.hid import GRID_COLS, message_rows

        for first in range(GRID_POSITIONS):
            for k in range(3):
                assert first // GRID_COLS not in message_rows(first, k)


class TestMouseMachine:
    def test_clicking_exact_centers_authorizes(self):
        auth = MouseAuth(random.Random(5))
        for pair in auth.challenge.pairs:
            auth.submit_click(target_center(pair.first))
            auth.submit_click(target_center(pair.second))
        assert auth.status is Status.AUTHORIZED

    def test_distance_exactly_radius_is_a_mismatch(self):
        auth = MouseAuth(random.Random(5))
        first = auth.challenge.pairs[0].first
        cx, cy = target_center(first)
        assert auth.submit_click((cx + TARGET_RADIUS, cy)) is Feedback.RESTARTED
        assert auth.attempts_used == 1

    def test_just_inside_radius_matches(self):
        auth = MouseAuth(random.Random(5))
        first = auth.challenge.pairs[0].first
        cx, cy = target_center(first)
        assert auth.submit_click((cx + TARGET_RADIUS - 1, cy)) is Feedback.ELEMENT_OK

    def test_three_bad_attempts_block(self):
        auth = MouseAuth(random.Random(5))
        for _ in range(3):
            auth.submit_click((-999, -999))
        assert auth.status is Status.BLOCKED
        assert auth.display_text == BLOCKED_MESSAGE.format(kind="mouse")
        assert auth.submit_click(target_center(0)) is Feedback.IGNORED

    def test_mismatch_resets_pair_progress(self):
        auth = MouseAuth(random.Random(9))
        pair = auth.challenge.pairs[0]
        auth.submit_click(target_center(pair.first))
        auth.submit_click((-999, -999))
        assert auth.pair_index == 0
        assert auth.point_index == 0
        assert auth.attempts_used == 1


class TestProbabilities:
    def test_keyboard_exact(self):
        p = attack_success_probability("keyboard")
        assert p == Fraction(3, 36**5) == Fraction(3, 60_466_176)
        assert p == Fraction(1, 20_155_392)  # "1 over about 20 millions"

    def test_mouse_exact(self):
        p = attack_success_probability("mouse")
        assert 24**3 * 11 * 17**2 == 43_946_496
        assert p == Fraction(3, 43_946_496) == Fraction(1, 14_648_832)
        # "1 over about 14 millions"
        assert 14_000_000 < 1 / float(p) < 15_000_000

    def test_space_sizes(self):
        assert KEYBOARD_SPACE == 36**5
        assert MOUSE_SPACE == 24**3 * 11 * 17**2

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            attack_success_probability("joystick")
