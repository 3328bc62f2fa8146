"""Composition of the merged vision-language reward model checkpoint.

The output keeps the LVLM's vision encoder and adapter verbatim, merges the
shared transformer per the recipe, merges the embedding matrices row-by-row,
takes the reward head verbatim from the text reward model, and drops the
language-modeling head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .components import ModelTriple, Role, validate_triple
from .embeddings import align_vocab, merge_embedding_rows
from .errors import TripleValidationError, VlrmergeError
from .merging import MergeRecipe, merge_transformer
from .tensorstore import Checkpoint, Tensor, write_checkpoint, write_vocab, default_vocab_path


@dataclass
class AssemblyPlan:
    recipe: MergeRecipe
    triple: ModelTriple
    output_path: Path | None = None
    provenance: dict[str, str] = field(default_factory=dict)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(plan: AssemblyPlan) -> dict[str, str]:
    recipe = plan.recipe
    meta = dict(plan.provenance)
    meta["recipe.method"] = recipe.method.value
    meta["recipe.lambda"] = repr(recipe.lam)
    if recipe.density is not None:
        meta["recipe.density"] = repr(recipe.density)
    if recipe.seed is not None:
        meta["recipe.seed"] = str(recipe.seed)
    meta["tool.version"] = __version__
    return meta


def check_merged_structure(merged: Checkpoint, triple: ModelTriple) -> list[str]:
    """Structural validation of an assembled checkpoint against its sources."""
    report = []
    lvlm = triple.lvlm
    rm = triple.rm
    for role in (Role.VISION_ENCODER, Role.ADAPTER):
        for name in lvlm.cmap.names(role):
            if name not in merged.tensors:
                report.append(f"missing {role.value} tensor {name}")
            elif merged.tensors[name].data != lvlm.ckpt.tensors[name].data:
                report.append(f"{role.value} tensor {name} is not byte-identical to the lvlm")
    for name in rm.cmap.names(Role.RM_HEAD):
        if name not in merged.tensors:
            report.append(f"missing reward head tensor {name}")
        elif merged.tensors[name].data != rm.ckpt.tensors[name].data:
            report.append(f"reward head tensor {name} is not byte-identical to the rm")
    for name in lvlm.cmap.names(Role.LM_HEAD):
        if name in merged.tensors and name not in rm.cmap.names(Role.RM_HEAD):
            report.append(f"language-modeling head tensor {name} must be dropped")
    for name in lvlm.cmap.names(Role.TRANSFORMER):
        if name not in merged.tensors:
            report.append(f"missing transformer tensor {name}")
    return report


def assemble_vlrm(plan: AssemblyPlan, jobs: int | None = None) -> Checkpoint:
    """Produce the merged checkpoint for a validated triple and recipe.

    Raises TripleValidationError when the triple is not mergeable and
    RecipeError on a method/hyperparameter mismatch.
    """
    report = validate_triple(plan.triple)
    if report:
        raise TripleValidationError(report)
    plan.recipe.validate()

    pre, lvlm, rm = plan.triple.pre, plan.triple.lvlm, plan.triple.rm
    out: dict[str, Tensor] = {}

    for role in (Role.VISION_ENCODER, Role.ADAPTER):
        for name in lvlm.cmap.names(role):
            out[name] = lvlm.ckpt.tensors[name]

    trans_names = lvlm.cmap.names(Role.TRANSFORMER)
    merged_trans = merge_transformer(
        plan.recipe,
        {n: pre.ckpt.tensors[n].to_f32() for n in trans_names},
        {n: lvlm.ckpt.tensors[n].to_f32() for n in trans_names},
        {n: rm.ckpt.tensors[n].to_f32() for n in trans_names},
        jobs=jobs,
    )
    for name in trans_names:
        out[name] = Tensor.from_f32(name, merged_trans[name], lvlm.ckpt.tensors[name].dtype)

    aligned = align_vocab(pre.ckpt.vocab, lvlm.ckpt.vocab, rm.ckpt.vocab)
    for name in lvlm.cmap.names(Role.EMBEDDING):
        rows = merge_embedding_rows(
            aligned,
            pre.ckpt.tensors[name].to_f32(),
            lvlm.ckpt.tensors[name].to_f32(),
            rm.ckpt.tensors[name].to_f32(),
            plan.recipe.method,
        )
        out[name] = Tensor.from_f32(name, rows, lvlm.ckpt.tensors[name].dtype)

    for name in rm.cmap.names(Role.RM_HEAD):
        if name in out:
            raise VlrmergeError(f"reward head name {name} collides with an lvlm tensor")
        out[name] = rm.ckpt.tensors[name]

    merged = Checkpoint(
        tensors=out,
        vocab=aligned.output_vocab(),
        metadata=_provenance(plan),
        source_label="merged",
    )
    structure = check_merged_structure(merged, plan.triple)
    if structure:
        raise VlrmergeError("assembled checkpoint failed structural checks:\n  " + "\n  ".join(structure))
    return merged


def write_merged(merged: Checkpoint, path: str | Path) -> Path:
    """Write the merged checkpoint and its vocabulary sidecar."""
    path = Path(path)
    write_checkpoint(merged, path)
    write_vocab(merged.vocab, default_vocab_path(path))
    return path
