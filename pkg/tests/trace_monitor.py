"""Independent safety monitor over a guard's event trace.

Reconstructs each port's authorization timeline purely from trace events
and checks that no device-originated content was handed to the host while
the port was not authorized.  Kept deliberately separate from the router's
own state machine so it cannot inherit its mistakes.
"""

DEVICE_CONTENT_VARIANTS = {"HidReport", "Attach", "EnumReply"}
GUARD_REPLY_VARIANTS = {"BlockReadReply", "WriteReply"}


class TraceSafetyViolation(AssertionError):
    pass


def check_trace_safety(trace) -> int:
    """Returns the number of host deliveries checked; raises on violation."""
    shadow: dict[int, str] = {}
    checked = 0
    for event in trace:
        state = shadow.get(event.port, "empty")
        if event.direction == "dev->u" and event.variant == "Attach":
            shadow[event.port] = "attached"
        elif event.direction == "dev->u" and event.variant == "LogicDetach":
            shadow[event.port] = "empty"
        elif event.direction == "u" and event.variant == "Authorized":
            shadow[event.port] = "authorized"
        elif event.direction == "u" and event.variant == "Blocked":
            shadow[event.port] = "blocked"
        elif event.direction == "u->host":
            checked += 1
            if event.variant in GUARD_REPLY_VARIANTS:
                continue
            if event.variant in DEVICE_CONTENT_VARIANTS and state != "authorized":
                raise TraceSafetyViolation(
                    f"t={event.t}: {event.variant} reached the host from port "
                    f"{event.port} in state {state!r}"
                )
    return checked
