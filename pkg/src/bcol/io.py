"""Structured-text (JSON) documents for MDPs, budgeted Q tables and policy logits.

Floats are written with 17 significant digits, so every round trip is
bit-exact. Tables are flattened in row-major order; see docs/formats.md.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import numpy as np

from .dp import BudgetedQ
from .mdp import FiniteMdp, validate_mdp


class FormatError(ValueError):
    pass


def _num(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise FormatError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def _array(a) -> str:
    return "[" + ", ".join(_num(x) for x in np.asarray(a, dtype=float).ravel()) + "]"


def _checked(loader):
    # missing keys and malformed entries surface as FormatError, not KeyError/TypeError
    @functools.wraps(loader)
    def wrapper(text: str):
        try:
            return loader(text)
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{loader.__name__}: malformed document ({type(exc).__name__}: {exc})") from None

    return wrapper


def _document(kind: str, ints: dict, floats: dict, arrays: dict) -> str:
    parts = [f'  "format": {json.dumps(kind)}', '  "version": 1']
    parts += [f"  {json.dumps(k)}: {int(v)}" for k, v in ints.items()]
    parts += [f"  {json.dumps(k)}: {_num(v)}" for k, v in floats.items()]
    parts += [f"  {json.dumps(k)}: {_array(v)}" for k, v in arrays.items()]
    return "{\n" + ",\n".join(parts) + "\n}\n"


def _load(text: str, kind: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"not a JSON document: {exc}") from None
    if doc.get("format") != kind:
        raise FormatError(f"expected format {kind!r}, got {doc.get('format')!r}")
    if doc.get("version") != 1:
        raise FormatError(f"unsupported version {doc.get('version')!r}")
    return doc


def _table(doc: dict, key: str, shape: tuple[int, ...]) -> np.ndarray:
    flat = np.asarray(doc[key], dtype=float)
    if flat.size != int(np.prod(shape)):
        raise FormatError(f"{key}: expected {int(np.prod(shape))} values, got {flat.size}")
    return flat.reshape(shape)


def dumps_mdp(mdp: FiniteMdp) -> str:
    return _document(
        "bcol-mdp",
        {"num_states": mdp.num_states, "num_actions": mdp.num_actions},
        {"discount": mdp.discount},
        {"reward": mdp.reward, "transition": mdp.transition, "initial_dist": mdp.initial_dist},
    )


@_checked
def loads_mdp(text: str) -> FiniteMdp:
    doc = _load(text, "bcol-mdp")
    S, A = int(doc["num_states"]), int(doc["num_actions"])
    mdp = FiniteMdp(
        _table(doc, "reward", (S, A)),
        _table(doc, "transition", (S, A, S)),
        _table(doc, "initial_dist", (S,)),
        float(doc["discount"]),
    )
    report = validate_mdp(mdp)
    if not report.ok:
        raise FormatError("invalid MDP: " + "; ".join(report.violations))
    return mdp


def dumps_q(q: BudgetedQ) -> str:
    return _document(
        "bcol-budgeted-q",
        {"num_states": q.num_states, "max_budget": q.max_budget, "num_actions": q.num_actions},
        {},
        {"values": q.values},
    )


@_checked
def loads_q(text: str) -> BudgetedQ:
    doc = _load(text, "bcol-budgeted-q")
    shape = (int(doc["num_states"]), int(doc["max_budget"]) + 1, int(doc["num_actions"]))
    return BudgetedQ(_table(doc, "values", shape))


def dumps_logits(logits: np.ndarray) -> str:
    S, H, A = logits.shape
    return _document(
        "bcol-policy-logits",
        {"num_states": S, "max_budget": H - 1, "num_actions": A},
        {},
        {"logits": logits},
    )


@_checked
def loads_logits(text: str) -> np.ndarray:
    doc = _load(text, "bcol-policy-logits")
    shape = (int(doc["num_states"]), int(doc["max_budget"]) + 1, int(doc["num_actions"]))
    return _table(doc, "logits", shape)


def save(path, text: str) -> None:
    Path(path).write_text(text)


def load(path) -> str:
    return Path(path).read_text()
