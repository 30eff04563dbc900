"""Input drivers: UiInstruction -> display automation commands run inside a session."""

from __future__ import annotations

import logging

from .errors import DriverError
from .executor import UiInstruction
from .protocol import ContainerRuntime, ContainerSession

logger = logging.getLogger(__name__)

_SCROLL_BUTTONS = {"up": "4", "down": "5", "left": "6", "right": "7"}
_SCROLL_CLICKS = 3
_LONG_PRESS_SEC = "1"

# Key names the LLM tends to emit, mapped to X keysyms.
_KEYSYMS = {
    "ctrl": "ctrl",
    "control": "ctrl",
    "alt": "alt",
    "shift": "shift",
    "meta": "super",
    "cmd": "super",
    "win": "super",
    "super": "super",
    "enter": "Return",
    "return": "Return",
    "esc": "Escape",
    "escape": "Escape",
    "tab": "Tab",
    "space": "space",
    "backspace": "BackSpace",
    "delete": "Delete",
    "del": "Delete",
    "up": "Up",
    "down": "Down",
    "left": "Left",
    "right": "Right",
    "home": "Home",
    "end": "End",
    "pageup": "Prior",
    "pagedown": "Next",
}


def keysym(key: str) -> str:
    k = key.strip()
    return _KEYSYMS.get(k.lower(), k)


def xdotool_argv(instr: UiInstruction) -> list[str]:
    """Single xdotool invocation (chained commands) for one instruction."""
    kind = instr.kind
    argv = ["xdotool"]
    if instr.position is not None:
        argv += ["mousemove", str(instr.position[0]), str(instr.position[1])]

    if kind == "click":
        argv += ["click", "1"]
    elif kind == "right_click":
        argv += ["click", "3"]
    elif kind == "double_click":
        argv += ["click", "--repeat", "2", "1"]
    elif kind == "triple_click":
        argv += ["click", "--repeat", "3", "1"]
    elif kind == "long_click":
        argv += ["mousedown", "1", "sleep", _LONG_PRESS_SEC, "mouseup", "1"]
    elif kind == "move":
        pass
    elif kind == "input":
        argv += ["click", "1", "type", "--", instr.text or ""]
    elif kind == "scroll":
        argv += ["click", "--repeat", str(_SCROLL_CLICKS), _SCROLL_BUTTONS[instr.direction or "down"]]
    elif kind == "drag":
        end = instr.end_position or instr.position or (0, 0)
        argv += ["mousedown", "1", "mousemove", str(end[0]), str(end[1]), "mouseup", "1"]
    elif kind == "keypress":
        argv += ["key", "+".join(keysym(k) for k in instr.keys or ())]
    elif kind == "wait":
        argv += ["sleep", f"{(instr.wait_ms or 0) / 1000.0:g}"]
    else:
        raise DriverError(f"no xdotool mapping for {kind!r}")
    return argv


class XdotoolDriver:
    """Drives an X11 virtual display with `xdotool`, captures via the runtime."""

    name = "xdotool"

    def __init__(self, runtime: ContainerRuntime) -> None:
        self.runtime = runtime

    def inject(self, instr: UiInstruction, session: ContainerSession) -> None:
        argv = xdotool_argv(instr)
        try:
            self.runtime.exec_in_session(session, argv)
        except (RuntimeError, OSError) as e:
            raise DriverError(f"{instr.kind} injection failed: {e}") from e

    def screenshot(self, session: ContainerSession) -> bytes:
        try:
            return self.runtime.capture_screenshot(session)
        except (RuntimeError, OSError) as e:
            raise DriverError(f"screenshot failed: {e}") from e
