"""Dataset manifests: persistent, hash-verified sequence collections.

A manifest ties together the per-sequence artifacts a generation or
translation run produced (PBM frames, TFLD lattices, force CSVs) with the
sensor descriptor, the resolved config, and the seed. Paths are stored
relative to the manifest file. Writes are atomic (tmp + rename) and byte
deterministic (sorted keys, repr floats).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import force as force_mod
from . import mpm
from .imaging import read_pbm
from .scenario import Phase
from .signals import segment_markers


def _canonical(obj):
    """JSON-stable form: dicts sorted, floats via repr round-trip."""
    if isinstance(obj, dict):
        return {str(k): _canonical(obj[k]) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    return obj


def config_hash(config, seed):
    blob = json.dumps({"config": _canonical(config), "seed": int(seed)},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SequenceRecord:
    seq_id: str
    indenter: str
    contact_point: list
    direction_rad: float
    depth_mm: float
    phases: list           # one label per frame
    frames: list           # PBM paths, relative to the manifest dir
    forces_csv: str
    lattices: list = field(default_factory=list)
    flagged_frames: list = field(default_factory=list)

    def to_dict(self):
        return {
            "seq_id": self.seq_id, "indenter": self.indenter,
            "contact_point": _canonical(self.contact_point),
            "direction_rad": float(self.direction_rad),
            "depth_mm": float(self.depth_mm), "phases": list(self.phases),
            "frames": list(self.frames), "forces_csv": self.forces_csv,
            "lattices": list(self.lattices),
            "flagged_frames": list(self.flagged_frames),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(seq_id=d["seq_id"], indenter=d["indenter"],
                   contact_point=d["contact_point"],
                   direction_rad=d["direction_rad"], depth_mm=d["depth_mm"],
                   phases=d["phases"], frames=d["frames"],
                   forces_csv=d["forces_csv"], lattices=d.get("lattices", []),
                   flagged_frames=d.get("flagged_frames", []))


@dataclass
class DatasetManifest:
    dataset_id: str
    sensor: dict            # pattern, material_id, zmax_mm, active_area_mm
    sequences: list
    config: dict
    seed: int
    base_dir: str = "."

    @property
    def hash(self):
        return config_hash(self.config, self.seed)

    def to_dict(self):
        return {
            "dataset_id": self.dataset_id,
            "sensor": _canonical(self.sensor),
            "sequences": [s.to_dict() for s in self.sequences],
            "config": _canonical(self.config),
            "config_hash": self.hash,
            "seed": int(self.seed),
        }

    def path(self, rel):
        return os.path.join(self.base_dir, rel)


def save_manifest(path, manifest):
    """Atomic manifest write; serialization is byte-deterministic."""
    data = json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(data)
    os.replace(tmp, path)


def load_manifest(path, check_files=True):
    """Load and validate a manifest.

    Validation: the stored config hash matches the recomputed one, every
    referenced file exists, and per sequence the frame/phase/force-row
    counts agree. Raises ValueError on any violation.
    """
    with open(path) as f:
        d = json.load(f)
    man = DatasetManifest(
        dataset_id=d["dataset_id"], sensor=d["sensor"],
        sequences=[SequenceRecord.from_dict(s) for s in d["sequences"]],
        config=d["config"], seed=d["seed"],
        base_dir=os.path.dirname(os.path.abspath(path)))
    if d.get("config_hash") != man.hash:
        raise ValueError(f"manifest config hash mismatch in {path}")
    if check_files:
        for seq in man.sequences:
            for rel in list(seq.frames) + list(seq.lattices) + [seq.forces_csv]:
                if not os.path.exists(man.path(rel)):
                    raise ValueError(f"missing dataset file: {rel}")
            rows = mpm.read_forces_csv(man.path(seq.forces_csv))
            if len(rows) != len(seq.frames):
                raise ValueError(
                    f"{seq.seq_id}: {len(seq.frames)} frames but "
                    f"{len(rows)} force rows")
            if len(seq.phases) != len(seq.frames):
                raise ValueError(f"{seq.seq_id}: phase count mismatch")
    return man


def load_sequence_forces(manifest, seq):
    rows = mpm.read_forces_csv(manifest.path(seq.forces_csv))
    forces = np.stack([r["force"] for r in rows])
    depths = np.array([r["depth_mm"] for r in rows])
    phases = [r["phase"] for r in rows]
    return forces, depths, phases


def load_samples(manifest, max_track_dist=15.0):
    """Manifest -> SequenceSamples (segment, track vs frame 0, featurize)."""
    samples = []
    for seq in manifest.sequences:
        marker_sets = [segment_markers(read_pbm(manifest.path(p)))
                       for p in seq.frames]
        feats = force_mod.sequence_features(marker_sets,
                                            max_track_dist=max_track_dist)
        forces, depths, phases = load_sequence_forces(manifest, seq)
        samples.append(force_mod.SequenceSample(
            features=feats, forces=forces, depths=depths, phases=phases,
            sensor_id=manifest.sensor.get("pattern", "")))
    return samples


def pair_frames(src_manifest, tgt_manifest):
    """Location-paired frame indices between two manifests.

    Sequences pair by (indenter, contact point, shear direction); within a
    pair, each source frame maps to the target frame with the same phase
    and the nearest normalized depth (depth / sensor zmax). Returns a list
    of (src_seq_idx, src_frame_idx, tgt_seq_idx, tgt_frame_idx).
    """
    def key(seq):
        return (seq.indenter,
                tuple(np.round(np.asarray(seq.contact_point, float), 6)),
                round(seq.direction_rad, 6), round(seq.depth_mm, 6))

    tgt_by_key = {key(s): j for j, s in enumerate(tgt_manifest.sequences)}
    src_zmax = float(src_manifest.sensor["zmax_mm"])
    tgt_zmax = float(tgt_manifest.sensor["zmax_mm"])
    pairs = []
    for i, s_seq in enumerate(src_manifest.sequences):
        j = tgt_by_key.get(key(s_seq))
        if j is None:
            continue
        t_seq = tgt_manifest.sequences[j]
        _, s_depths, s_phases = load_sequence_forces(src_manifest, s_seq)
        _, t_depths, t_phases = load_sequence_forces(tgt_manifest, t_seq)
        t_norm = t_depths / tgt_zmax
        for fi, (d, ph) in enumerate(zip(s_depths, s_phases)):
            z_hat = d / src_zmax
            cand = [k for k, p in enumerate(t_phases) if p == ph]
            if not cand:
                continue
            best = min(cand, key=lambda k: abs(t_norm[k] - z_hat))
            pairs.append((i, fi, j, best))
    return pairs
