"""Parameter registry, Adam, learning-rate schedules and a finite-difference verifier.

Every differentiable operation in the package is written as a forward
function plus a hand-derived pullback. Trainable arrays live in a
:class:`ParamStore`; pullbacks accumulate into ``store.grads``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_FORMAT = "stdf4d-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Entry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named f64 arrays with matching gradients and Adam state.

    Values are updated in place, so arrays handed out by :meth:`get` stay
    valid across optimizer steps. Entry order is insertion order and is
    the order used for checkpoints and gradient checks.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64, copy=True)
        self._entries[name] = Entry(
            value=arr,
            grad=np.zeros_like(arr),
            m=np.zeros_like(arr),
            v=np.zeros_like(arr),
        )
        return arr

    def replace(self, name: str, value, m=None, v=None) -> np.ndarray:
        """Swap an entry's array (e.g. after densification changes its length)."""
        old = self._entries[name]
        arr = np.array(value, dtype=np.float64, copy=True)
        self._entries[name] = Entry(
            value=arr,
            grad=np.zeros_like(arr),
            m=np.zeros_like(arr) if m is None else np.array(m, dtype=np.float64),
            v=np.zeros_like(arr) if v is None else np.array(v, dtype=np.float64),
            step=old.step,
        )
        return arr

    def remove(self, name: str) -> None:
        del self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def get(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def accumulate(self, name: str, g) -> None:
        if name in self._entries:
            self._entries[name].grad += g

    def size(self) -> int:
        return sum(e.value.size for e in self._entries.values())


def zero_grads(store: ParamStore, names: Iterable[str] | None = None) -> ParamStore:
    for name in store.names() if names is None else names:
        store.grad(name).fill(0.0)
    return store


def adam_step(
    store: ParamStore,
    lr: float | dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
    names: Iterable[str] | None = None,
) -> ParamStore:
    """One bias-corrected Adam update on the selected entries.

    ``lr`` is either a scalar or a per-entry mapping. Entries absent from a
    mapping are skipped. Gradients are checked for finiteness before any
    value is touched.
    """
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    selected = list(store.names() if names is None else names)
    if isinstance(lr, dict):
        selected = [n for n in selected if n in lr]
    for name in selected:
        if not np.all(np.isfinite(store.grad(name))):
            raise NonFiniteError(f"non-finite gradient in entry {name!r}")
    for name in selected:
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate <= 0:
            raise ValueError(f"learning rate must be positive, got {rate} for {name!r}")
        e = store.entry(name)
        e.step += 1
        g = e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        tmp = np.multiply(g, g)
        tmp *= 1.0 - beta2
        e.v += tmp
        bc1 = 1.0 - beta1**e.step
        bc2 = 1.0 - beta2**e.step
        np.divide(e.v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(e.m, tmp, out=tmp)
        tmp *= rate / bc1
        e.value -= tmp
    return store


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    final: float
    total_steps: int

    def __post_init__(self):
        if self.initial <= 0 or self.final <= 0:
            raise ValueError("exponential schedule needs positive endpoints")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Log-linear interpolation from ``initial`` to ``final``, flat afterwards."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step == 0:
        return schedule.initial
    if step >= schedule.total_steps:
        return schedule.final
    return schedule.initial * (schedule.final / schedule.initial) ** (step / schedule.total_steps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_entry: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None
    n_checked: int = 0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


_EPS = float(np.finfo(np.float64).eps)


def grad_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    max_per_entry: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` must return the scalar value and accumulate its gradient into the
    store. Relative error uses the denominator ``max(|a|, |fd|, 1e-8)``.
    Where both the analytic value and the central difference lie within
    the difference's rounding bound ``4 * eps * (|f(x+h)| + |f(x-h)|) / (2h)``
    of zero, the derivative is confirmed as zero (relative error is
    meaningless there). With ``max_per_entry`` a random subset of
    each entry's elements is probed (large feature grids).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(store.names() if names is None else names)
    zero_grads(store)
    f0 = f(store)
    if not math.isfinite(f0):
        raise NonFiniteError("f is non-finite at the base point")
    analytic = {n: store.grad(n).copy() for n in names}
    report = GradCheckReport(max_rel_error=0.0)
    rng = rng or np.random.default_rng(0)
    for name in names:
        flat = store.get(name).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_entry is not None and flat.size > max_per_entry:
            idx = np.sort(rng.choice(flat.size, size=max_per_entry, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            fp = f(store)
            flat[i] = keep - h
            fm = f(store)
            flat[i] = keep
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite when probing {name}[{i}]")
            fd = (fp - fm) / (2.0 * h)
            resolution = 4.0 * _EPS * (abs(fp) + abs(fm)) / (2.0 * h)
            if abs(ga[i]) <= resolution and abs(fd) <= resolution:
                err = 0.0
            else:
                err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), 1e-8)
            if err > worst:
                worst = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(i))
            report.n_checked += 1
        report.per_entry[name] = worst
    zero_grads(store)
    return report


# -- checkpoints ------------------------------------------------------------


def _hex(arr: np.ndarray) -> str:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes().hex()


def _unhex(s: str, shape) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(s), dtype="<f8").reshape(shape).astype(np.float64)


def store_to_dict(store: ParamStore, header: dict | None = None, step: int = 0) -> dict:
    entries = {}
    for name in store.names():
        e = store.entry(name)
        entries[name] = {
            "shape": list(e.value.shape),
            "value": _hex(e.value),
            "m": _hex(e.m),
            "v": _hex(e.v),
            "step": e.step,
        }
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "step": step,
        "entries": entries,
    }


def store_from_dict(doc: dict) -> tuple[ParamStore, dict, int]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a checkpoint document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    store = ParamStore()
    for name, rec in doc["entries"].items():
        shape = tuple(rec["shape"])
        store.add(name, _unhex(rec["value"], shape))
        e = store.entry(name)
        e.m[...] = _unhex(rec["m"], shape)
        e.v[...] = _unhex(rec["v"], shape)
        e.step = int(rec["step"])
    return store, doc.get("header", {}), int(doc.get("step", 0))


def save_checkpoint(path, store: ParamStore, header: dict | None = None, step: int = 0) -> None:
    doc = store_to_dict(store, header, step)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path) -> tuple[ParamStore, dict, int]:
    return store_from_dict(json.loads(Path(path).read_text()))
