from __future__ import annotations

import pytest

from ripple_difftest.drivers import XdotoolDriver, keysym, xdotool_argv
from ripple_difftest.errors import DriverError
from ripple_difftest.executor import UiInstruction
from ripple_difftest.protocol import ContainerSession


def _i(**raw) -> UiInstruction:
    return UiInstruction.from_dict(raw, (640, 480))


@pytest.mark.parametrize(
    ("raw", "argv"),
    [
        ({"kind": "click", "position": [5, 6]}, "mousemove 5 6 click 1"),
        ({"kind": "right_click", "position": [5, 6]}, "mousemove 5 6 click 3"),
        ({"kind": "double_click", "position": [5, 6]}, "mousemove 5 6 click --repeat 2 1"),
        ({"kind": "triple_click", "position": [5, 6]}, "mousemove 5 6 click --repeat 3 1"),
        ({"kind": "long_click", "position": [5, 6]}, "mousemove 5 6 mousedown 1 sleep 1 mouseup 1"),
        ({"kind": "move", "position": [5, 6]}, "mousemove 5 6"),
        ({"kind": "scroll", "direction": "up"}, "click --repeat 3 4"),
        ({"kind": "scroll", "direction": "right"}, "click --repeat 3 7"),
        (
            {"kind": "drag", "position": [5, 6], "end_position": [50, 60]},
            "mousemove 5 6 mousedown 1 mousemove 50 60 mouseup 1",
        ),
        ({"kind": "keypress", "keys": ["Ctrl", "a"]}, "key ctrl+a"),
        ({"kind": "keypress", "keys": ["enter"]}, "key Return"),
        ({"kind": "wait", "wait_ms": 1500}, "sleep 1.5"),
    ],
)
def test_xdotool_argv(raw: dict, argv: str) -> None:
    assert xdotool_argv(_i(**raw)) == ["xdotool", *argv.split()]


def test_input_text_is_passed_as_one_argument() -> None:
    argv = xdotool_argv(_i(kind="input", position=[1, 2], text="-- two words"))
    assert argv == ["xdotool", "mousemove", "1", "2", "click", "1", "type", "--", "-- two words"]


def test_keysyms() -> None:
    assert keysym(" PageDown ") == "Next"
    assert keysym("cmd") == "super"
    assert keysym("F5") == "F5"


class _Runtime:
    name = "fake"

    def __init__(self, error: Exception | None = None) -> None:
        self.error = error
        self.calls: list[list[str]] = []

    def exec_in_session(self, session, argv) -> str:
        self.calls.append(list(argv))
        if self.error:
            raise self.error
        return ""

    def capture_screenshot(self, session) -> bytes:
        if self.error:
            raise self.error
        return b"png"


def test_driver_wraps_runtime_failures() -> None:
    session = ContainerSession("s1", "img", "rev", (640, 480), state="running")
    ok = _Runtime()
    XdotoolDriver(ok).inject(_i(kind="click", position=[1, 1]), session)
    assert ok.calls == [["xdotool", "mousemove", "1", "1", "click", "1"]]
    assert XdotoolDriver(ok).screenshot(session) == b"png"

    broken = XdotoolDriver(_Runtime(RuntimeError("command failed: exit 1")))
    with pytest.raises(DriverError):
        broken.inject(_i(kind="click", position=[1, 1]), session)
    with pytest.raises(DriverError):
        broken.screenshot(session)
