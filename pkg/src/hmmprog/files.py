"""On-disk formats: JSON model files, CSV sequence files, atomic writes.

Floats go through ``repr``, the shortest decimal string that parses back to
the same double, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .distributions import ComponentParams
from .errors import InvalidInputError
from .pomdp import AlphaSet, AlphaVectorPolicy
from .prognostics import ProfileLibrary
from .tmhmm import EndLabel, ObservationSequence, TiedMixtureHmm

MODEL_FORMAT = "hmmprog-model"
POLICY_FORMAT = "hmmprog-policy"
FORMAT_VERSION = 1


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path``, then rename over it."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


# -- models ------------------------------------------------------------------


def model_to_dict(m: TiedMixtureHmm) -> dict:
    return {
        "n_states": m.n_states,
        "terminal": m.terminal,
        "absorbing": m.absorbing,
        "failure_emits": m.failure_emits,
        "initial": m.initial.tolist(),
        "trans": m.trans.tolist(),
        "mask": m.mask.astype(int).tolist(),
        "mixweights": m.mixweights.tolist(),
        "components": [{"families": [f.value for f in c.families], "params": [list(p) for p in c.params]} for c in m.components],
    }


def model_from_dict(d: dict) -> TiedMixtureHmm:
    try:
        comps = tuple(ComponentParams(tuple(c["families"]), tuple(tuple(p) for p in c["params"])) for c in d["components"])
        m = TiedMixtureHmm(
            np.array(d["initial"], dtype=float),
            np.array(d["trans"], dtype=float),
            np.array(d["mixweights"], dtype=float),
            comps,
            terminal=int(d["terminal"]),
            mask=np.array(d["mask"], dtype=bool),
            absorbing=bool(d["absorbing"]),
            failure_emits=bool(d["failure_emits"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed model entry: {exc}") from exc
    if m.n_states != d.get("n_states", m.n_states):
        raise InvalidInputError("n_states does not match the transition matrix")
    return m


def dumps_model(model) -> str:
    """Serialise a :class:`TiedMixtureHmm` or a :class:`ProfileLibrary`."""
    doc = {"format": MODEL_FORMAT, "version": FORMAT_VERSION}
    if isinstance(model, ProfileLibrary):
        doc["kind"] = "library"
        doc["prior"] = model.prior.tolist()
        doc["profiles"] = [model_to_dict(m) for m in model.profiles]
    else:
        doc["kind"] = "model"
        doc["model"] = model_to_dict(model)
    return _dumps(doc)


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise InvalidInputError("not a model file")
    if doc.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported model file version {doc.get('version')}")
    if doc.get("kind") == "model":
        return model_from_dict(doc["model"])
    if doc.get("kind") == "library":
        return ProfileLibrary(tuple(model_from_dict(p) for p in doc["profiles"]), np.array(doc["prior"], dtype=float))
    raise InvalidInputError(f"unknown model kind {doc.get('kind')!r}")


def save_model(path, model) -> None:
    atomic_write(path, dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_text())


# -- policies ------------------------------------------------------------------


def dumps_policy(policy: AlphaVectorPolicy, discount: float) -> str:
    doc = {
        "format": POLICY_FORMAT,
        "version": FORMAT_VERSION,
        "discount": discount,
        "action_names": list(policy.action_names),
        "horizons": [
            {"horizon": h + 1, "actions": s.actions.tolist(), "alphas": s.alphas.tolist()} for h, s in enumerate(policy.sets)
        ],
    }
    return _dumps(doc)


def loads_policy(text: str) -> AlphaVectorPolicy:
    try:
        doc = json.loads(text)
        if doc.get("format") != POLICY_FORMAT:
            raise InvalidInputError("not a policy file")
        sets = tuple(
            AlphaSet(np.array(h["alphas"], dtype=float), np.array(h["actions"], dtype=np.int64)) for h in doc["horizons"]
        )
        return AlphaVectorPolicy(sets, tuple(doc["action_names"]))
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise InvalidInputError(f"malformed policy file: {exc}") from exc


# -- sequences -----------------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def dumps_sequences(seqs: Sequence[ObservationSequence], asset_ids: Iterable | None = None, sensors: Sequence[str] | None = None) -> str:
    """CSV text ``asset_id,step,<sensors>,endlabel``; blank cells are missing values."""
    seqs = list(seqs)
    if not seqs:
        raise InvalidInputError("no sequences to write")
    dim = seqs[0].dim
    sensors = list(sensors) if sensors is not None else [f"x{d}" for d in range(dim)]
    asset_ids = list(asset_ids) if asset_ids is not None else list(range(len(seqs)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["asset_id", "step", *sensors, "endlabel"])
    for aid, s in zip(asset_ids, seqs):
        last = len(s) - 1
        for t in range(len(s)):
            vals = [_fmt(v) if ok else "" for v, ok in zip(s.obs[t], s.masks[t])]
            w.writerow([aid, int(s.times[t]), *vals, s.endlabel.value if t == last else ""])
    return buf.getvalue()


def loads_sequences(text: str):
    """Parse sequence CSV text into ``(asset_ids, sequences, sensor_names)``.

    Errors name the offending line (the header is line 1).
    """
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise InvalidInputError("line 1: empty sequence file") from None
    header = [h.strip() for h in header]
    if len(header) < 4 or header[:2] != ["asset_id", "step"] or header[-1] != "endlabel":
        raise InvalidInputError("line 1: header must be asset_id,step,<sensor columns...>,endlabel")
    sensors = header[2:-1]
    groups: dict[str, list] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InvalidInputError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        aid = row[0].strip()
        try:
            step = int(row[1])
            vals = [float(c) if c.strip() else np.nan for c in row[2:-1]]
        except ValueError as exc:
            raise InvalidInputError(f"line {lineno}: {exc}") from None
        if any(math.isinf(v) for v in vals):
            raise InvalidInputError(f"line {lineno}: infinite sensor value")
        label = row[-1].strip()
        g = groups.setdefault(aid, [])
        if g:
            if g[-1][3]:
                raise InvalidInputError(f"line {lineno}: asset {aid} continues after its end label")
            if step <= g[-1][1]:
                raise InvalidInputError(f"line {lineno}: steps for asset {aid} must strictly increase")
        if label and label not in (EndLabel.FAILED.value, EndLabel.CENSORED.value):
            raise InvalidInputError(f"line {lineno}: end label must be 'failed' or 'censored', got {label!r}")
        g.append((lineno, step, vals, label))
    if not groups:
        raise InvalidInputError("sequence file has no data rows")
    ids, seqs = [], []
    for aid, g in groups.items():
        if not g[-1][3]:
            raise InvalidInputError(f"line {g[-1][0]}: final row of asset {aid} lacks an end label")
        obs = np.array([r[2] for r in g], dtype=float)
        ids.append(aid)
        seqs.append(ObservationSequence.from_array(obs, EndLabel(g[-1][3]), times=[r[1] for r in g]))
    return ids, seqs, sensors


def save_sequences(path, seqs, asset_ids=None, sensors=None) -> None:
    atomic_write(path, dumps_sequences(seqs, asset_ids, sensors))


def load_sequences(path):
    return loads_sequences(Path(path).read_text())


def dumps_rows(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """CSV text with floats rendered exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(float(v)))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)
