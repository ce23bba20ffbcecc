"""Model bundle serialization.

A bundle is a zip archive with two mandatory members:

  metadata.json   UTF-8 JSON: format_version, architecture spec, training
                  fingerprint, dtype, an ordered parameter manifest
                  (name/shape/trainable) and the SHA-256 of weights.npz.
  weights.npz     standard numpy .npz: one array per parameter, keyed by
                  parameter name.

Checkpoints additionally carry optimizer.npz (optimizer slots + step) so a
run can resume bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import BundleError, BundleFormatError, BundleIntegrityError
from .backbones import ArchitectureSpec, Network, build

FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    spec: ArchitectureSpec
    network: Network
    fingerprint: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    optimizer_state: dict | None = None


def _npz_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save(bundle: ModelBundle, path) -> None:
    net = bundle.network
    params = net.parameters()
    weights = _npz_bytes({p.name: p.value for p in params})
    meta = {
        "format_version": bundle.format_version,
        "spec": bundle.spec.to_dict(),
        "fingerprint": bundle.fingerprint,
        "dtype": net.dtype.name,
        "init_seed": net.init_seed,
        "parameters": [
            {"name": p.name, "shape": list(p.value.shape), "trainable": p.trainable}
            for p in params
        ],
        "weights_sha256": hashlib.sha256(weights).hexdigest(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("metadata.json", json.dumps(meta, indent=1))
        zf.writestr("weights.npz", weights, compress_type=zipfile.ZIP_STORED)
        if bundle.optimizer_state is not None:
            zf.writestr("optimizer.npz", _npz_bytes(bundle.optimizer_state),
                        compress_type=zipfile.ZIP_STORED)


def load(path) -> ModelBundle:
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "metadata.json" not in names or "weights.npz" not in names:
                raise BundleError(f"{path}: not a model bundle (missing members)")
            meta = json.loads(zf.read("metadata.json"))
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise BundleFormatError(
                    f"{path}: bundle format_version {version} is not supported "
                    f"(this build reads version {FORMAT_VERSION})")
            weights = zf.read("weights.npz")
            if hashlib.sha256(weights).hexdigest() != meta["weights_sha256"]:
                raise BundleIntegrityError(f"{path}: weights blob fails its checksum")
            opt_state = None
            if "optimizer.npz" in names:
                with np.load(io.BytesIO(zf.read("optimizer.npz"))) as oz:
                    opt_state = {k: oz[k] for k in oz.files}
    except zipfile.BadZipFile as e:
        raise BundleError(f"{path}: corrupt or not a bundle archive ({e})") from e

    spec = ArchitectureSpec.from_dict(meta["spec"])
    net = build(spec, seed=meta.get("init_seed", 0), dtype=np.dtype(meta["dtype"]))
    by_name = {p.name: p for p in net.parameters()}
    expected = [e["name"] for e in meta["parameters"]]
    if sorted(by_name) != sorted(expected):
        raise BundleError(f"{path}: parameter set does not match the declared architecture")
    with np.load(io.BytesIO(weights)) as wz:
        for name in expected:
            arr = wz[name]
            p = by_name[name]
            if arr.shape != p.value.shape:
                raise BundleError(
                    f"{path}: parameter {name} has shape {arr.shape}, expected {p.value.shape}")
            p.value = arr.astype(net.dtype, copy=False)
    return ModelBundle(spec=spec, network=net, fingerprint=meta.get("fingerprint", {}),
                       format_version=version, optimizer_state=opt_state)
