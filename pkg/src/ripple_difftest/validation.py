from __future__ import annotations

import json
import re
from collections.abc import Iterable, Sequence
from typing import Any


class SchemaValidationError(ValueError):
    def __init__(self, errors: list[str]) -> None:
        self.errors = errors
        msg = "schema validation failed"
        if errors:
            msg += ": " + "; ".join(errors[:5])
            if len(errors) > 5:
                msg += f" ... (+{len(errors) - 5} more)"
        super().__init__(msg)


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _require(condition: bool, path: str, message: str, errors: list[str]) -> None:
    if not condition:
        errors.append(f"{path}: {message}")


def _require_non_empty_str(value: Any, path: str, errors: list[str]) -> None:
    _require(isinstance(value, str) and value.strip() != "", path, "must be a non-empty string", errors)


def _require_list(value: Any, path: str, errors: list[str]) -> list[Any]:
    if not isinstance(value, list):
        errors.append(f"{path}: must be a list")
        return []
    return value


def _require_str_list(value: Any, path: str, errors: list[str]) -> list[str]:
    items = _require_list(value, path, errors)
    for i, item in enumerate(items):
        _require_non_empty_str(item, f"{path}[{i}]", errors)
    return [x for x in items if isinstance(x, str)]


def _optional_str(value: Any, path: str, errors: list[str]) -> None:
    _require(value is None or isinstance(value, str), path, "must be a string or null", errors)


_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Parse the structured block of an LLM reply.

    Prefers the last fenced block; falls back to the whole reply and then to the
    last JSON-like start, since models tend to put prose before the payload.
    """
    payload = text.strip()
    if not payload:
        raise ValueError("empty reply while expecting json")

    for block in reversed(_FENCE_RE.findall(payload)):
        try:
            return json.loads(block)
        except json.JSONDecodeError:
            continue

    try:
        return json.loads(payload)
    except json.JSONDecodeError:
        pass

    starts = [i for i, ch in enumerate(payload) if ch in "[{"]
    for i in reversed(starts):
        try:
            return json.loads(payload[i:].strip().rstrip("`").strip())
        except json.JSONDecodeError:
            continue

    raise ValueError("failed to parse json from reply")


def _mentions_code(text: str, forbidden: Sequence[str]) -> str | None:
    for token in forbidden:
        if token and token in text:
            return token
    return None


def forbidden_code_tokens(paths: Iterable[str]) -> list[str]:
    out: set[str] = set()
    for p in paths:
        if not p:
            continue
        out.add(p)
        base = p.rsplit("/", 1)[-1]
        # Extensionless basenames ("app", "main") collide with ordinary words.
        if "." in base.strip("."):
            out.add(base)
    # Longest first so error messages name the most specific match.
    return sorted(out, key=lambda s: (-len(s), s))


def _validate_end_user_text(text: Any, path: str, forbidden: Sequence[str], errors: list[str]) -> None:
    if not isinstance(text, str):
        return
    hit = _mentions_code(text, forbidden)
    _require(hit is None, path, f"must be end-user phrased (mentions {hit!r})", errors)


def _validate_scenario_body(
    s: dict[str, Any],
    path: str,
    forbidden: Sequence[str],
    errors: list[str],
    *,
    require_values: bool = False,
) -> None:
    _require_non_empty_str(s.get("title"), f"{path}.title", errors)
    pre = s.get("preconditions", [])
    _require_str_list(pre, f"{path}.preconditions", errors)

    steps = _require_list(s.get("steps"), f"{path}.steps", errors)
    _require(len(steps) > 0, f"{path}.steps", "must be a non-empty list", errors)
    for si, step in enumerate(steps):
        spath = f"{path}.steps[{si}]"
        _require(isinstance(step, dict), spath, "must be an object", errors)
        if not isinstance(step, dict):
            continue
        _require_non_empty_str(step.get("description"), f"{spath}.description", errors)
        _optional_str(step.get("expected_observation"), f"{spath}.expected_observation", errors)
        _validate_end_user_text(step.get("description"), f"{spath}.description", forbidden, errors)
        _validate_end_user_text(
            step.get("expected_observation"), f"{spath}.expected_observation", forbidden, errors
        )

    _validate_test_data(s.get("test_data", []), f"{path}.test_data", errors, require_values=require_values)


def _validate_test_data(value: Any, path: str, errors: list[str], *, require_values: bool) -> None:
    data = _require_list(value, path, errors)
    for di, d in enumerate(data):
        dpath = f"{path}[{di}]"
        _require(isinstance(d, dict), dpath, "must be an object", errors)
        if not isinstance(d, dict):
            continue
        _require_non_empty_str(d.get("name"), f"{dpath}.name", errors)
        _require(isinstance(d.get("constraint", ""), str), f"{dpath}.constraint", "must be a string", errors)
        value_ = d.get("concrete_value", "")
        if require_values:
            _require_non_empty_str(value_, f"{dpath}.concrete_value", errors)
        else:
            _require(isinstance(value_, str), f"{dpath}.concrete_value", "must be a string", errors)


def validate_generation_payload(payload: Any, *, forbidden: Sequence[str]) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)

    analysis = payload.get("change_impact_analysis")
    _require(isinstance(analysis, dict), "reply.change_impact_analysis", "must be an object", errors)
    if isinstance(analysis, dict):
        _require_non_empty_str(
            analysis.get("intent_explanation"), "reply.change_impact_analysis.intent_explanation", errors
        )
        behaviors = _require_str_list(
            analysis.get("affected_behaviors", []), "reply.change_impact_analysis.affected_behaviors", errors
        )
        for bi, b in enumerate(behaviors):
            _validate_end_user_text(
                b, f"reply.change_impact_analysis.affected_behaviors[{bi}]", forbidden, errors
            )
        _require_str_list(
            analysis.get("high_risk_cases", []), "reply.change_impact_analysis.high_risk_cases", errors
        )

    scenarios = _require_list(payload.get("test_scenarios"), "reply.test_scenarios", errors)
    _require(len(scenarios) > 0, "reply.test_scenarios", "must be a non-empty list", errors)
    for i, s in enumerate(scenarios):
        spath = f"reply.test_scenarios[{i}]"
        _require(isinstance(s, dict), spath, "must be an object", errors)
        if isinstance(s, dict):
            _validate_scenario_body(s, spath, forbidden, errors)

    if errors:
        raise SchemaValidationError(errors)


def validate_queries_payload(payload: Any) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if isinstance(payload, dict):
        _require_str_list(payload.get("queries"), "reply.queries", errors)
    if errors:
        raise SchemaValidationError(errors)


def validate_enrichment_payload(payload: Any, *, forbidden: Sequence[str]) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)

    scenarios = _require_list(payload.get("scenarios"), "reply.scenarios", errors)
    for i, s in enumerate(scenarios):
        spath = f"reply.scenarios[{i}]"
        _require(isinstance(s, dict), spath, "must be an object", errors)
        if not isinstance(s, dict):
            continue
        _optional_str(s.get("scenario_id"), f"{spath}.scenario_id", errors)
        _optional_str(s.get("replaces"), f"{spath}.replaces", errors)
        _require_list(s.get("provenance", []), f"{spath}.provenance", errors)
        _validate_scenario_body(s, spath, forbidden, errors)

    if errors:
        raise SchemaValidationError(errors)


def validate_test_data_payload(
    payload: Any, *, known_ids: set[str], incomplete_ids: set[str]
) -> None:
    """`incomplete_ids` are scenarios whose current data lacks concrete values; the reply must cover them."""
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)

    seen: set[str] = set()
    scenarios = _require_list(payload.get("scenarios"), "reply.scenarios", errors)
    for i, s in enumerate(scenarios):
        spath = f"reply.scenarios[{i}]"
        _require(isinstance(s, dict), spath, "must be an object", errors)
        if not isinstance(s, dict):
            continue
        sid = s.get("scenario_id")
        _require(sid in known_ids, f"{spath}.scenario_id", "must reference a scenario of the batch", errors)
        if isinstance(sid, str):
            seen.add(sid)
        _validate_test_data(s.get("test_data"), f"{spath}.test_data", errors, require_values=True)

    for sid in sorted(incomplete_ids - seen):
        errors.append(f"reply.scenarios: missing concrete test data for {sid}")

    if errors:
        raise SchemaValidationError(errors)


def validate_detection_payload(payload: Any) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)

    _optional_str(payload.get("holistic_summary"), "reply.holistic_summary", errors)
    verdicts = _require_list(payload.get("verdicts"), "reply.verdicts", errors)
    for i, v in enumerate(verdicts):
        vpath = f"reply.verdicts[{i}]"
        _require(isinstance(v, dict), vpath, "must be an object", errors)
        if not isinstance(v, dict):
            continue
        _require(_is_int(v.get("region_index")), f"{vpath}.region_index", "must be an integer", errors)
        _require(
            v.get("classification") in ("expected", "bug"),
            f"{vpath}.classification",
            "must be one of ['bug', 'expected']",
            errors,
        )
        _require(isinstance(v.get("description", ""), str), f"{vpath}.description", "must be a string", errors)
        _require(isinstance(v.get("reasoning", ""), str), f"{vpath}.reasoning", "must be a string", errors)
        _optional_str(v.get("report_key"), f"{vpath}.report_key", errors)
        _optional_str(v.get("title"), f"{vpath}.title", errors)

    if errors:
        raise SchemaValidationError(errors)


FILTER_OUTCOMES = ("keep", "duplicate_of", "rendering_artifact", "nondeterministic")


def validate_filter_payload(payload: Any) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)

    decisions = _require_list(payload.get("decisions"), "reply.decisions", errors)
    for i, d in enumerate(decisions):
        dpath = f"reply.decisions[{i}]"
        _require(isinstance(d, dict), dpath, "must be an object", errors)
        if not isinstance(d, dict):
            continue
        _require_non_empty_str(d.get("report_id"), f"{dpath}.report_id", errors)
        outcome = d.get("outcome")
        _require(outcome in FILTER_OUTCOMES, f"{dpath}.outcome", f"must be one of {list(FILTER_OUTCOMES)}", errors)
        if outcome == "duplicate_of":
            _require_non_empty_str(d.get("duplicate_of"), f"{dpath}.duplicate_of", errors)
        _require(isinstance(d.get("rationale", ""), str), f"{dpath}.rationale", "must be a string", errors)

    if errors:
        raise SchemaValidationError(errors)
