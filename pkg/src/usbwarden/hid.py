"""Keyboard and mouse captcha state machines.

A newly attached input device is authorized only after a human reproduces
a random challenge on it: a 5-symbol alphanumeric code typed on a
keyboard, or three target pairs clicked with a mouse.  Three failed
attempts block the device until it is physically re-attached.

The device itself receives no per-element feedback of any kind: progress
is shown only on the guard's display, so a guessing device learns nothing
from a partially-correct attempt.

Mouse geometry: a 6x4 grid of 24 targets on a 480x320 logical display,
matching radius 26 (pairwise target distance is 80, so targets cannot
overlap).  After the first target of a pair is shown, the instruction
message occupies two spare rows for the first pair and one row for the
others, leaving 11 and 17 admissible second-target positions.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from fractions import Fraction

KEYBOARD_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
CODE_LENGTH = 5
MAX_ATTEMPTS = 3

DISPLAY_WIDTH = 480
DISPLAY_HEIGHT = 320
GRID_COLS = 6
GRID_ROWS = 4
GRID_POSITIONS = GRID_COLS * GRID_ROWS
TARGET_RADIUS = 26.0
PAIR_COUNT = 3

KEYBOARD_SPACE = len(KEYBOARD_ALPHABET) ** CODE_LENGTH
MOUSE_SPACE = GRID_POSITIONS**3 * 11 * 17**2

BLOCKED_MESSAGE = (
    "*** Authorization failed ***\n"
    "Device claims to be a {kind}.\n"
    "Is it true? Is the device malicious?\n"
    "To check it again, re-attach it."
)
KEYBOARD_PROMPT = "To start using the keyboard pls type:\n{code}"
KEYBOARD_RETRY = "Wrong code - try again.\nTo start using the keyboard pls type:\n{code}"
MOUSE_PROMPT = "To start using the mouse pls draw a line\nbetween the two highlighted targets."
MOUSE_RETRY = "Wrong input - try again.\nTo start using the mouse pls draw a line\nbetween the two highlighted targets."
AUTHORIZED_MESSAGE = "Device authorized - you can use it now."


class Status(enum.Enum):
    IN_PROGRESS = "in-progress"
    AUTHORIZED = "authorized"
    BLOCKED = "blocked"


class Feedback(enum.Enum):
    ELEMENT_OK = "element-ok"
    RESTARTED = "restarted"
    AUTHORIZED = "authorized"
    BLOCKED = "blocked"
    IGNORED = "ignored"


@dataclass(frozen=True)
class KeyboardChallenge:
    code: str


@dataclass(frozen=True)
class MousePair:
    first: int
    second: int


@dataclass(frozen=True)
class MouseChallenge:
    pairs: tuple[MousePair, ...]


def gen_keyboard_challenge(rng: random.Random) -> KeyboardChallenge:
    return KeyboardChallenge("".join(rng.choice(KEYBOARD_ALPHABET) for _ in range(CODE_LENGTH)))


def target_center(position: int) -> tuple[float, float]:
    if not 0 <= position < GRID_POSITIONS:
        raise ValueError(f"position {position} outside the {GRID_POSITIONS}-target grid")
    col, row = position % GRID_COLS, position // GRID_COLS
    spacing_x = DISPLAY_WIDTH // GRID_COLS
    spacing_y = DISPLAY_HEIGHT // GRID_ROWS
    return (spacing_x // 2 + spacing_x * col, spacing_y // 2 + spacing_y * row)


def message_rows(first_position: int, pair_index: int) -> tuple[int, ...]:
    """Rows taken by the instruction text once the first target is placed.

    Two rows for the first pair, one for the rest; never the row holding
    the first target.
    """
    want = 2 if pair_index == 0 else 1
    first_row = first_position // GRID_COLS
    free = [r for r in range(GRID_ROWS) if r != first_row]
    return tuple(free[:want])


def admissible_second_positions(first_position: int, pair_index: int) -> tuple[int, ...]:
    taken_rows = set(message_rows(first_position, pair_index))
    return tuple(
        p
        for p in range(GRID_POSITIONS)
        if p // GRID_COLS not in taken_rows and p != first_position
    )


def gen_mouse_challenge(rng: random.Random) -> MouseChallenge:
    pairs = []
    for k in range(PAIR_COUNT):
        first = rng.randrange(GRID_POSITIONS)
        second = rng.choice(admissible_second_positions(first, k))
        pairs.append(MousePair(first, second))
    return MouseChallenge(tuple(pairs))


def click_matches(point: tuple[float, float], position: int) -> bool:
    """Strictly-below-radius euclidean match against a target center."""
    cx, cy = target_center(position)
    return math.dist(point, (cx, cy)) < TARGET_RADIUS


class _Authorizer:
    """Shared attempt bookkeeping for both challenge kinds."""

    kind = "device"

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.attempts_used = 0
        self.status = Status.IN_PROGRESS
        self.display_text = ""

    def _new_challenge(self) -> None:
        raise NotImplementedError

    def _fail_attempt(self) -> Feedback:
        self.attempts_used += 1
        if self.attempts_used >= MAX_ATTEMPTS:
            self.status = Status.BLOCKED
            self.display_text = BLOCKED_MESSAGE.format(kind=self.kind)
            return Feedback.BLOCKED
        # A fresh challenge per retry: a guesser cannot accumulate
        # per-position information across attempts.
        self._new_challenge()
        return Feedback.RESTARTED

    def _authorize(self) -> Feedback:
        self.status = Status.AUTHORIZED
        self.display_text = AUTHORIZED_MESSAGE
        return Feedback.AUTHORIZED


class KeyboardAuth(_Authorizer):
    kind = "keyboard"

    def __init__(self, rng: random.Random):
        super().__init__(rng)
        self.element_index = 0
        self.challenge = gen_keyboard_challenge(rng)
        self.display_text = KEYBOARD_PROMPT.format(code=self.challenge.code)

    def _new_challenge(self) -> None:
        self.challenge = gen_keyboard_challenge(self.rng)
        self.element_index = 0
        self.display_text = KEYBOARD_RETRY.format(code=self.challenge.code)

    def submit_key(self, symbol: str) -> Feedback:
        if self.status is not Status.IN_PROGRESS:
            return Feedback.IGNORED
        if len(symbol) == 1 and symbol.upper() == self.challenge.code[self.element_index]:
            self.element_index += 1
            if self.element_index == CODE_LENGTH:
                return self._authorize()
            return Feedback.ELEMENT_OK
        return self._fail_attempt()

    submit = submit_key


class MouseAuth(_Authorizer):
    kind = "mouse"

    def __init__(self, rng: random.Random):
        super().__init__(rng)
        self.pair_index = 0
        self.point_index = 0
        self.challenge = gen_mouse_challenge(rng)
        self.display_text = MOUSE_PROMPT

    def _new_challenge(self) -> None:
        self.challenge = gen_mouse_challenge(self.rng)
        self.pair_index = 0
        self.point_index = 0
        self.display_text = MOUSE_RETRY

    def submit_click(self, point: tuple[float, float]) -> Feedback:
        if self.status is not Status.IN_PROGRESS:
            return Feedback.IGNORED
        pair = self.challenge.pairs[self.pair_index]
        expected = pair.first if self.point_index == 0 else pair.second
        if not click_matches(point, expected):
            return self._fail_attempt()
        if self.point_index == 0:
            self.point_index = 1
            return Feedback.ELEMENT_OK
        self.point_index = 0
        self.pair_index += 1
        if self.pair_index == PAIR_COUNT:
            return self._authorize()
        return Feedback.ELEMENT_OK

    submit = submit_click


def make_authorizer(declared_type: str, rng: random.Random) -> _Authorizer:
    if declared_type == "keyboard":
        return KeyboardAuth(rng)
    if declared_type == "mouse":
        return MouseAuth(rng)
    raise ValueError(f"no authorizer for device type {declared_type!r}")


def attack_success_probability(kind: str) -> Fraction:
    """Exact chance that a guessing device passes within its 3 attempts."""
    if kind == "keyboard":
        return Fraction(MAX_ATTEMPTS, KEYBOARD_SPACE)
    if kind == "mouse":
        return Fraction(MAX_ATTEMPTS, MOUSE_SPACE)
    raise ValueError(f"unknown challenge kind {kind!r}")
