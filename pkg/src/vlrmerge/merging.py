"""Per-tensor merge kernels over transformer weights and task vectors.

Five strategies are supported:

* linear            -- elementwise weighted average of the two fine-tuned models
* task-arithmetic   -- base weights plus the scaled sum of both task vectors
* ties              -- magnitude-trim each task vector, elect a per-element
                       sign by total magnitude, average sign-matching survivors
* dare-task-arithmetic / dare-ties
                    -- random-drop task-vector entries with probability 1 - d
                       and rescale survivors by 1/d before combining

All arithmetic runs in float32 regardless of storage dtype. Randomness is
counter-based: the value drawn for element ``i`` of a tensor is a pure function
of (seed, origin tag, tensor name, i), so results do not depend on iteration
order or worker count.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import RecipeError, VlrmergeError

TensorMap = dict[str, np.ndarray]


class MergeMethod(str, Enum):
    LINEAR = "linear"
    TASK_ARITHMETIC = "task-arithmetic"
    TIES = "ties"
    DARE_TASK_ARITHMETIC = "dare-task-arithmetic"
    DARE_TIES = "dare-ties"

    @property
    def needs_density(self) -> bool:
        return self in (MergeMethod.TIES, MergeMethod.DARE_TASK_ARITHMETIC, MergeMethod.DARE_TIES)

    @property
    def needs_seed(self) -> bool:
        return self in (MergeMethod.DARE_TASK_ARITHMETIC, MergeMethod.DARE_TIES)


@dataclass(frozen=True)
class MergeRecipe:
    """One point in the sweep grid: method plus its hyperparameters."""

    method: MergeMethod
    lam: float
    density: float | None = None
    seed: int | None = None

    def validate(self) -> None:
        problems = []
        if self.method is MergeMethod.LINEAR:
            if not 0.0 <= self.lam <= 1.0:
                problems.append(f"lambda must be in [0, 1] for {self.method.value}, got {self.lam}")
        elif self.lam < 0.0:
            problems.append(f"lambda must be >= 0, got {self.lam}")
        if self.method.needs_density:
            if self.density is None:
                problems.append(f"--density is required for method {self.method.value}")
            elif not 0.0 < self.density <= 1.0:
                problems.append(f"density must be in (0, 1], got {self.density}")
        elif self.density is not None:
            problems.append(f"--density is not accepted for method {self.method.value}")
        if self.method.needs_seed:
            if self.seed is None:
                problems.append(f"--seed is required for method {self.method.value}")
            elif not 0 <= self.seed < 2**64:
                problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise RecipeError("; ".join(problems))

    def slug(self) -> str:
        parts = [self.method.value, f"l{self.lam:g}"]
        if self.density is not None:
            parts.append(f"d{self.density:g}")
        if self.seed is not None:
            parts.append(f"s{self.seed}")
        return "-".join(parts)


@dataclass
class TaskVector:
    """Per-tensor float32 deltas of a fine-tuned model against the shared base."""

    deltas: TensorMap
    origin: str  # "lvlm" or "rm"; keys the drop-mask random stream


def _check_aligned(named_maps: dict[str, TensorMap]) -> None:
    items = list(named_maps.items())
    first_label, first = items[0]
    names = set(first)
    for label, other in items[1:]:
        if set(other) != names:
            missing = sorted(names ^ set(other))
            raise VlrmergeError(
                f"tensor name mismatch between {first_label} and {label}: {missing[:5]}"
            )
        for name in names:
            if first[name].shape != other[name].shape:
                raise VlrmergeError(
                    f"shape mismatch for {name}: {first_label} {first[name].shape} "
                    f"vs {label} {other[name].shape}"
                )


def compute_task_vector(model_trans: TensorMap, pre_trans: TensorMap, origin: str) -> TaskVector:
    """Elementwise float32 difference: fine-tuned weights minus base weights."""
    _check_aligned({"model": model_trans, "base": pre_trans})
    deltas = {
        name: model_trans[name].astype(np.float32) - pre_trans[name].astype(np.float32)
        for name in model_trans
    }
    return TaskVector(deltas=deltas, origin=origin)


def merge_linear(lvlm_trans: TensorMap, rm_trans: TensorMap, lam: float) -> TensorMap:
    """Convex combination lam * lvlm + (1 - lam) * rm, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise RecipeError(f"lambda must be in [0, 1], got {lam}")
    _check_aligned({"lvlm": lvlm_trans, "rm": rm_trans})
    return {name: _linear_array(lvlm_trans[name], rm_trans[name], lam) for name in lvlm_trans}


def merge_task_arithmetic(
    pre_trans: TensorMap, tau_lvlm: TaskVector, tau_rm: TaskVector, lam: float
) -> TensorMap:
    """Base weights plus lam times the sum of both task vectors."""
    if lam < 0.0:
        raise RecipeError(f"lambda must be >= 0, got {lam}")
    _check_aligned({"pre": pre_trans, "tau_lvlm": tau_lvlm.deltas, "tau_rm": tau_rm.deltas})
    return {
        name: _task_arithmetic_array(pre_trans[name], tau_lvlm.deltas[name], tau_rm.deltas[name], lam)
        for name in pre_trans
    }


def trim_by_magnitude(tau: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density * n) largest-magnitude entries per tensor, zero the rest.

    Magnitude ties at the cut keep the lower flat index.
    """
    _check_density(density)
    return TaskVector(
        deltas={name: _trim_array(arr, density) for name, arr in tau.deltas.items()},
        origin=tau.origin,
    )


def elect_sign(taus: list[TaskVector]) -> TensorMap:
    """Per element, pick the direction with the larger total magnitude.

    Returns +-1.0 arrays; a tie (including the all-zero case) resolves to +1.
    """
    if not taus:
        raise VlrmergeError("sign election needs at least one task vector")
    _check_aligned({f"tau{i}": t.deltas for i, t in enumerate(taus)})
    return {
        name: _elect_arrays([t.deltas[name] for t in taus]) for name in taus[0].deltas
    }


def disjoint_merge(taus: list[TaskVector], signs: TensorMap) -> TaskVector:
    """Mean of the nonzero, sign-matching values per element; 0 when none qualify."""
    if not taus:
        raise VlrmergeError("disjoint merge needs at least one task vector")
    _check_aligned({f"tau{i}": t.deltas for i, t in enumerate(taus)})
    merged = {
        name: _disjoint_arrays([t.deltas[name] for t in taus], signs[name])
        for name in taus[0].deltas
    }
    return TaskVector(deltas=merged, origin="merged")


def merge_ties(
    pre_trans: TensorMap,
    tau_lvlm: TaskVector,
    tau_rm: TaskVector,
    lam: float,
    density: float,
) -> TensorMap:
    """Trim both task vectors, elect signs jointly, average survivors, add to base.

    The jointly merged delta receives a single lam factor: each retained element
    contributes its mean at weight lam.
    """
    _check_density(density)
    _check_aligned({"pre": pre_trans, "tau_lvlm": tau_lvlm.deltas, "tau_rm": tau_rm.deltas})
    out = {}
    for name in pre_trans:
        a = _trim_array(tau_lvlm.deltas[name], density)
        b = _trim_array(tau_rm.deltas[name], density)
        sign = _elect_arrays([a, b])
        merged = _disjoint_arrays([a, b], sign)
        out[name] = _apply_delta(pre_trans[name], merged, lam)
    return out


def dare_sparsify(tau: TaskVector, density: float, seed: int) -> TaskVector:
    """Randomly keep each entry with probability d and rescale survivors by 1/d.

    With drop probability p this is the usual 1/(1-p) rescale, d = 1 - p.
    d = 1 returns the input unchanged and consumes no randomness.
    """
    _check_density(density)
    return TaskVector(
        deltas={
            name: _dare_array(arr, density, seed, tau.origin, name)
            for name, arr in tau.deltas.items()
        },
        origin=tau.origin,
    )


def merge_dare(
    pre_trans: TensorMap,
    tau_lvlm: TaskVector,
    tau_rm: TaskVector,
    lam: float,
    density: float,
    seed: int,
    mode: str,
) -> TensorMap:
    """Drop-and-rescale both task vectors, then combine per ``mode``.

    mode "ta": base + lam * (sparsified lvlm delta + sparsified rm delta).
    mode "ties": the random drop replaces magnitude trimming; sign election and
    the disjoint mean run on the already-rescaled survivors.
    """
    if mode not in ("ta", "ties"):
        raise VlrmergeError(f"unknown dare mode {mode!r}")
    _check_density(density)
    _check_aligned({"pre": pre_trans, "tau_lvlm": tau_lvlm.deltas, "tau_rm": tau_rm.deltas})
    out = {}
    for name in pre_trans:
        a = _dare_array(tau_lvlm.deltas[name], density, seed, tau_lvlm.origin, name)
        b = _dare_array(tau_rm.deltas[name], density, seed, tau_rm.origin, name)
        if mode == "ta":
            out[name] = _task_arithmetic_array(pre_trans[name], a, b, lam)
        else:
            sign = _elect_arrays([a, b])
            merged = _disjoint_arrays([a, b], sign)
            out[name] = _apply_delta(pre_trans[name], merged, lam)
    return out


def merge_transformer(
    recipe: MergeRecipe,
    pre_trans: TensorMap,
    lvlm_trans: TensorMap,
    rm_trans: TensorMap,
    jobs: int | None = None,
) -> TensorMap:
    """Merge the shared transformer weights per the recipe.

    Tensors are independent, so they are processed in parallel when jobs > 1;
    results are identical for any worker count.
    """
    recipe.validate()
    _check_aligned({"pre": pre_trans, "lvlm": lvlm_trans, "rm": rm_trans})
    method, lam, density, seed = recipe.method, recipe.lam, recipe.density, recipe.seed

    def merge_one(name: str) -> np.ndarray:
        pre = pre_trans[name]
        lvlm = lvlm_trans[name]
        rm = rm_trans[name]
        if method is MergeMethod.LINEAR:
            return _linear_array(lvlm, rm, lam)
        tau_l = lvlm.astype(np.float32) - pre.astype(np.float32)
        tau_r = rm.astype(np.float32) - pre.astype(np.float32)
        if method is MergeMethod.TASK_ARITHMETIC:
            return _task_arithmetic_array(pre, tau_l, tau_r, lam)
        if method is MergeMethod.TIES:
            a = _trim_array(tau_l, density)
            b = _trim_array(tau_r, density)
        else:
            a = _dare_array(tau_l, density, seed, "lvlm", name)
            b = _dare_array(tau_r, density, seed, "rm", name)
            if method is MergeMethod.DARE_TASK_ARITHMETIC:
                return _task_arithmetic_array(pre, a, b, lam)
        sign = _elect_arrays([a, b])
        merged = _disjoint_arrays([a, b], sign)
        return _apply_delta(pre, merged, lam)

    names = list(pre_trans)
    if jobs is not None and jobs <= 1:
        return {name: merge_one(name) for name in names}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(merge_one, names)
        return dict(zip(names, results))


# ---------------------------------------------------------------------------
# per-array kernels (float32 in, float32 out)


def _check_density(density: float) -> None:
    if not 0.0 < density <= 1.0:
        raise RecipeError(f"density must be in (0, 1], got {density}")


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) if arr.dtype != np.float32 else arr


def _linear_array(lvlm: np.ndarray, rm: np.ndarray, lam: float) -> np.ndarray:
    lvlm, rm = _as_f32(lvlm), _as_f32(rm)
    # exact identities at the endpoints, untouched by rounding
    if lam == 1.0:
        return lvlm.copy()
    if lam == 0.0:
        return rm.copy()
    return lam * lvlm + (1.0 - lam) * rm


def _task_arithmetic_array(
    pre: np.ndarray, tau_l: np.ndarray, tau_r: np.ndarray, lam: float
) -> np.ndarray:
    pre = _as_f32(pre)
    if lam == 0.0:
        return pre.copy()
    return pre + lam * (_as_f32(tau_l) + _as_f32(tau_r))


def _apply_delta(pre: np.ndarray, delta: np.ndarray, lam: float) -> np.ndarray:
    pre = _as_f32(pre)
    if lam == 0.0:
        return pre.copy()
    return pre + lam * delta


def retained_count(density: float, n: int) -> int:
    """ceil(density * n), at least 1 when density > 0 and n > 0.

    The tiny nudge cancels binary-float noise so grid densities behave like the
    exact decimals they denote (0.2 * 100 keeps 20 entries, not 21).
    """
    if n == 0:
        return 0
    k = math.ceil(density * n - 1e-9)
    return min(max(k, 1), n)


def _trim_array(arr: np.ndarray, density: float) -> np.ndarray:
    arr = _as_f32(arr)
    flat = arr.ravel()
    k = retained_count(density, flat.size)
    if k >= flat.size:
        return arr.copy()
    # stable sort on descending magnitude keeps the lower flat index on ties
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(arr.shape)


def _elect_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    pos = np.zeros(arrays[0].shape, dtype=np.float32)
    neg = np.zeros(arrays[0].shape, dtype=np.float32)
    for arr in arrays:
        arr = _as_f32(arr)
        pos += np.where(arr > 0, arr, np.float32(0.0))
        neg += np.where(arr < 0, -arr, np.float32(0.0))
    return np.where(pos >= neg, np.float32(1.0), np.float32(-1.0))


def _disjoint_arrays(arrays: list[np.ndarray], sign: np.ndarray) -> np.ndarray:
    total = np.zeros(arrays[0].shape, dtype=np.float32)
    count = np.zeros(arrays[0].shape, dtype=np.int32)
    for arr in arrays:
        arr = _as_f32(arr)
        match = ((arr > 0) & (sign > 0)) | ((arr < 0) & (sign < 0))
        total += np.where(match, arr, np.float32(0.0))
        count += match
    return np.divide(
        total,
        count.astype(np.float32),
        out=np.zeros_like(total),
        where=count > 0,
    )


# ---------------------------------------------------------------------------
# counter-based random stream for the drop masks

_MIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_M1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_M2 = np.uint64(0x94D049BB133111EB)


def stream_key(seed: int, origin: str, name: str) -> int:
    """64-bit stream key derived from (seed, origin tag, tensor name)."""
    digest = hashlib.sha256(
        b"dare\x00" + seed.to_bytes(8, "little") + b"\x00"
        + origin.encode("utf-8") + b"\x00" + name.encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little")


def element_uniforms(key: int, n: int) -> np.ndarray:
    """Uniform [0, 1) draws for flat indices 0..n-1 of one stream.

    Draw i mixes ``key + i * gamma`` through the splitmix64 finalizer, so any
    element's value can be produced independently of the others.
    """
    idx = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + idx * _MIX_GAMMA
        z ^= z >> np.uint64(30)
        z *= _MIX_M1
        z ^= z >> np.uint64(27)
        z *= _MIX_M2
        z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _dare_array(arr: np.ndarray, density: float, seed: int, origin: str, name: str) -> np.ndarray:
    arr = _as_f32(arr)
    if density == 1.0:
        return arr.copy()
    uniforms = element_uniforms(stream_key(seed, origin, name), arr.size)
    keep = (uniforms < density).reshape(arr.shape)
    return np.where(keep, arr * (1.0 / density), np.float32(0.0))
