"""Global counters used to verify runtime properties of pipelines.

The light pipeline is required to be backprop-free; every gradient kernel in
the package reports here so a whole run can be audited with two calls.
"""

_BACKWARD_CALLS = 0


def record_backward_call() -> None:
    global _BACKWARD_CALLS
    _BACKWARD_CALLS += 1


def backward_call_count() -> int:
    return _BACKWARD_CALLS


def reset_backward_counter() -> None:
    global _BACKWARD_CALLS
    _BACKWARD_CALLS = 0
