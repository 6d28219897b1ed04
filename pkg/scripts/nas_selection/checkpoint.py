"""Versioned supernet checkpoint file.

Deterministic JSON (``indent=2``, insertion order) with every float written
via ``float.hex`` so identical runs produce identical bytes. Top-level fields,
in order:

    format        "nas-selection-checkpoint"
    version       CHECKPOINT_VERSION
    spec_hash     sha256 of the space descriptor
    space         space descriptor (variant, dims, per-edge pools)
    input_dim     raw dataset width
    num_classes
    noise_seed
    weights       {name: {"shape": [...], "data": [hex, ...]}}, names sorted
    alpha         {"src->dst": [hex, ...]}, edge order
    masks         {"src->dst": [bool, ...]}, edge order
    alpha_frozen
    renormalize
    discretized   {"src->dst": op_tag}, edge order
    pruned        ["src->dst", ...], edge order
    prng          {"seed": int, "counter": int}: base stream of the training run and
                  the epochs it has completed, or null
    optimizer     learning rates, momentum (hex), step counters and velocity
                  buffers (written like weights, names sorted), or null
    meta          free-form run metadata (epoch, mode, ...)
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import OptState, OptimizerError, Tensor
from .errors import NasSelectionError
from .searchspace import CellSpec, Edge, OpKind, SpaceVariant
from .supernet import AlphaTable, Supernet, alpha_name

CHECKPOINT_FORMAT = "nas-selection-checkpoint"
CHECKPOINT_VERSION = 2


class CheckpointError(NasSelectionError):
    """Unreadable checkpoint, wrong version, or space mismatch."""


@dataclass
class CheckpointInfo:
    spec_hash: str
    prng: dict[str, int] | None = None
    meta: dict[str, Any] = field(default_factory=dict)
    optimizer: OptState | None = None


def _hex(values: np.ndarray) -> list[str]:
    return [float(v).hex() for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def _unhex(values: list[str], shape: tuple[int, ...]) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)


def _tensor_entry(data: np.ndarray) -> dict[str, Any]:
    return {"shape": list(data.shape), "data": _hex(data)}


def _optimizer_document(state: OptState) -> dict[str, Any]:
    return {
        "learning_rate_w": float(state.learning_rate_w).hex(),
        "learning_rate_alpha": float(state.learning_rate_alpha).hex(),
        "momentum": float(state.momentum).hex(),
        "step_count": state.step_count,
        "alpha_step_count": state.alpha_step_count,
        "velocity": {name: _tensor_entry(state.velocity[name]) for name in sorted(state.velocity)},
    }


def _optimizer_from_document(document: dict[str, Any]) -> OptState:
    return OptState(
        learning_rate_w=float.fromhex(document["learning_rate_w"]),
        learning_rate_alpha=float.fromhex(document["learning_rate_alpha"]),
        momentum=float.fromhex(document["momentum"]),
        step_count=int(document["step_count"]),
        alpha_step_count=int(document["alpha_step_count"]),
        velocity={
            name: _unhex(entry["data"], tuple(entry["shape"]))
            for name, entry in document["velocity"].items()
        },
    )


def checkpoint_bytes(
    supernet: Supernet,
    prng_state: dict[str, int] | None = None,
    meta: dict[str, Any] | None = None,
    optimizer: OptState | None = None,
) -> bytes:
    spec = supernet.spec
    table = supernet.alpha_table
    weights = supernet.weights
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec_hash": spec.spec_hash(),
        "space": spec.descriptor(),
        "input_dim": supernet.input_dim,
        "num_classes": supernet.num_classes,
        "noise_seed": supernet.noise_seed,
        "weights": {name: _tensor_entry(weights[name].data) for name in sorted(weights)},
        "alpha": {str(e): _hex(table.alpha[e].data) for e in spec.edges},
        "masks": {str(e): [bool(m) for m in table.mask[e]] for e in spec.edges},
        "alpha_frozen": table.frozen,
        "renormalize": table.renormalize,
        "discretized": {
            str(e): supernet.discretized[e].tag for e in spec.edges if e in supernet.discretized
        },
        "pruned": [str(e) for e in spec.edges if e in supernet.pruned_edges],
        "prng": prng_state,
        "optimizer": None if optimizer is None else _optimizer_document(optimizer),
        "meta": meta or {},
    }
    return (json.dumps(document, indent=2) + "\n").encode("utf-8")


def save_checkpoint(
    supernet: Supernet,
    path: Path,
    prng_state: dict[str, int] | None = None,
    meta: dict[str, Any] | None = None,
    optimizer: OptState | None = None,
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(supernet, prng_state, meta, optimizer))
    return path


def spec_from_descriptor(descriptor: dict[str, Any]) -> CellSpec:
    num_inputs = int(descriptor["num_inputs"])
    num_intermediate = int(descriptor["num_intermediate"])
    edges = tuple(
        Edge(target=t, source=s)
        for t in range(num_inputs, num_inputs + num_intermediate)
        for s in range(t)
    )
    pools = tuple(tuple(OpKind.from_tag(tag) for tag in descriptor["pools"][str(e)]) for e in edges)
    return CellSpec(
        SpaceVariant.parse(descriptor["variant"]),
        num_inputs,
        num_intermediate,
        int(descriptor["feature_width"]),
        edges,
        pools,
    )


def load_checkpoint(
    path: Path, expected_spec: CellSpec | None = None
) -> tuple[Supernet, CheckpointInfo]:
    """
    Load a checkpoint written by ``save_checkpoint``.

    Args:
        path: Checkpoint file
        expected_spec: When given, the checkpoint must describe exactly this space

    Returns:
        (supernet, info)

    Raises:
        CheckpointError: Unreadable file, format/version mismatch, corrupted
            space descriptor, or a space other than ``expected_spec``
    """
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a supernet checkpoint")
    if document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {document.get('version')} != supported {CHECKPOINT_VERSION}"
        )

    try:
        spec = spec_from_descriptor(document["space"])
    except (KeyError, ValueError, NasSelectionError) as e:
        raise CheckpointError(f"invalid space descriptor in {path}: {e}") from e
    if spec.spec_hash() != document["spec_hash"]:
        raise CheckpointError(f"space descriptor in {path} does not match its spec_hash")
    if expected_spec is not None and expected_spec.spec_hash() != spec.spec_hash():
        raise CheckpointError(
            f"checkpoint space {spec.variant.value} ({spec.spec_hash()[:12]}) does not match "
            f"configured space {expected_spec.variant.value} ({expected_spec.spec_hash()[:12]})"
        )

    weights = {
        name: Tensor(_unhex(entry["data"], tuple(entry["shape"])), requires_grad=True, name=name)
        for name, entry in document["weights"].items()
    }
    table = AlphaTable(
        spec=spec,
        alpha={
            e: Tensor(_unhex(document["alpha"][str(e)], (len(spec.pool(e)),)), True, alpha_name(e))
            for e in spec.edges
        },
        mask={e: np.array(document["masks"][str(e)], dtype=bool) for e in spec.edges},
        frozen=bool(document["alpha_frozen"]),
        renormalize=bool(document["renormalize"]),
    )
    discretized = {Edge.parse(k): OpKind.from_tag(v) for k, v in document["discretized"].items()}
    table.decided.update(discretized)
    supernet = Supernet(
        spec=spec,
        input_dim=int(document["input_dim"]),
        num_classes=int(document["num_classes"]),
        weights=weights,
        alpha_table=table,
        noise_seed=int(document["noise_seed"]),
        discretized=discretized,
        pruned_edges={Edge.parse(e) for e in document["pruned"]},
    )
    optimizer = None
    if document.get("optimizer") is not None:
        try:
            optimizer = _optimizer_from_document(document["optimizer"])
        except (KeyError, ValueError, OptimizerError) as e:
            raise CheckpointError(f"invalid optimizer state in {path}: {e}") from e
    info = CheckpointInfo(
        document["spec_hash"], document.get("prng"), document.get("meta", {}), optimizer
    )
    return supernet, info
