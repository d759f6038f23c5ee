"""Patient-organised MRI slice datasets and a synthetic stand-in generator.

On-disk layout::

    root/
      manifest.json
      case/<patient_id>/<slice_index>_<label>.png
      control/<patient_id>/<slice_index>_<label>.png

with ``label`` in {normal, anomaly}. Control patients only have normal
slices. The manifest lists every patient, its matched case (controls only),
slice counts and a sha256 per file. It also records the decode order and the
resize filter.
"""

import hashlib
import io
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..errors import ConfigurationError
from .subset import GROUP_NORMAL, GROUP_SEEN, GROUP_UNSEEN, Subset

IMAGE_SHAPE = (256, 256, 3)
LABELS = {"normal": 0, "anomaly": 1}
SLICE_RE = re.compile(r"^(\d+)_(normal|anomaly)\.png$")
MANIFEST = "manifest.json"
RESIZE_FILTER = "bilinear"


class SliceReadError(ConfigurationError):
    def __init__(self, path, reason):
        super().__init__(f"cannot read slice {path}: {reason}")
        self.path = Path(path)


@dataclass
class SliceRef:
    path: Path
    label: int
    index: int


@dataclass
class PatientRecord:
    patient_id: str
    is_case: bool
    slices: list = field(default_factory=list)
    matched_case: Optional[str] = None

    @property
    def n_normal(self):
        return sum(1 for s in self.slices if s.label == 0)

    @property
    def n_anomaly(self):
        return sum(1 for s in self.slices if s.label == 1)


def read_slice(path) -> np.ndarray:
    """Decode one slice to uint8 (256, 256, 3), resizing bilinearly if needed."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != IMAGE_SHAPE[1::-1]:
                im = im.resize(IMAGE_SHAPE[1::-1], Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise SliceReadError(path, exc) from exc


def _scan_patient(pdir: Path, is_case: bool):
    slices = []
    for f in sorted(pdir.iterdir()):
        m = SLICE_RE.match(f.name)
        if not m:
            continue
        try:
            with Image.open(f) as im:
                im.verify()
        except Exception as exc:
            raise SliceReadError(f, exc) from exc
        label = LABELS[m.group(2)]
        if not is_case and label == 1:
            raise ConfigurationError(f"control patient slice labelled anomaly: {f}")
        slices.append(SliceRef(f, label, int(m.group(1))))
    slices.sort(key=lambda s: s.index)
    return slices


def load_slice_dataset(root) -> list:
    """Read patient records from ``root``; images are decoded lazily."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"slice dataset root {root} does not exist")
    matched = {}
    mpath = root / MANIFEST
    if mpath.exists():
        doc = json.loads(mpath.read_text())
        matched = {p["patient_id"]: p.get("matched_case") for p in doc.get("patients", [])}
    records = []
    for group, is_case in (("case", True), ("control", False)):
        gdir = root / group
        if not gdir.is_dir():
            continue
        for pdir in sorted(p for p in gdir.iterdir() if p.is_dir()):
            slices = _scan_patient(pdir, is_case)
            if not slices:
                warnings.warn(f"patient {pdir.name} has no slices; skipped")
                continue
            records.append(PatientRecord(pdir.name, is_case, slices, matched.get(pdir.name)))
    _assign_missing_matches(records)
    return records


def _assign_missing_matches(records):
    # Controls without a recorded match are dealt round-robin over the cases.
    cases = [r.patient_id for r in records if r.is_case]
    if not cases:
        return
    unmatched = [r for r in records if not r.is_case and r.matched_case not in cases]
    for i, r in enumerate(unmatched):
        r.matched_case = cases[i % len(cases)]


# --- synthetic stand-in -------------------------------------------------------

_YY, _XX = np.mgrid[0 : IMAGE_SHAPE[0], 0 : IMAGE_SHAPE[1]].astype(np.float32)


@dataclass
class _Anatomy:
    radii: tuple
    blob_xy: np.ndarray  # (k, 2) start positions
    blob_v: np.ndarray  # (k, 2) drift per slice
    blob_amp: np.ndarray
    blob_sigma: np.ndarray


def _sample_anatomy(rng):
    k = 8
    ang = rng.uniform(0, 2 * np.pi, k)
    rad = rng.uniform(0, 0.7, k)
    return _Anatomy(
        radii=(rng.uniform(92, 108), rng.uniform(74, 90)),
        blob_xy=np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1),
        blob_v=rng.normal(0, 0.004, (k, 2)),
        blob_amp=rng.uniform(0.08, 0.3, k),
        blob_sigma=rng.uniform(10, 28, k),
    )


def _render(anat: _Anatomy, t, n_slices, patch=None):
    cy, cx = IMAGE_SHAPE[0] / 2, IMAGE_SHAPE[1] / 2
    scale = 0.6 + 0.4 * np.sin(np.pi * (t + 0.5) / n_slices)
    ry, rx = anat.radii[1] * scale, anat.radii[0] * scale
    r2 = ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2
    img = np.zeros(IMAGE_SHAPE[:2], np.float32)
    inside = r2 < 1.0
    img[inside] = 0.35
    img += 0.45 * np.exp(-(((np.sqrt(r2) - 1.06) / 0.04) ** 2))  # skull rim
    for (bx, by), (vx, vy), a, s in zip(anat.blob_xy, anat.blob_v, anat.blob_amp, anat.blob_sigma):
        px, py = cx + (bx + vx * t) * rx, cy + (by + vy * t) * ry
        img += inside * a * np.exp(-((_XX - px) ** 2 + (_YY - py) ** 2) / (2 * s * s))
    if patch is not None:
        (px, py, phase, freq) = patch
        ux, uy = cx + px * rx, cy + py * ry
        envelope = np.exp(-((_XX - ux) ** 2 + (_YY - uy) ** 2) / (2 * 14.0**2))
        texture = np.sin(2 * np.pi * freq * _XX + phase) * np.sin(2 * np.pi * freq * _YY + phase)
        img += inside * 0.3 * envelope * texture
    return np.clip(img, 0.0, 1.0)


def _encode_png(gray):
    u8 = np.round(gray * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(np.repeat(u8[:, :, None], 3, axis=2)).save(buf, format="PNG")
    return buf.getvalue()


def _anomaly_counts(n_cases, n_controls, slices_per_patient, ratio=5.0):
    total = slices_per_patient * (n_cases + n_controls)
    target = int(round(total / (ratio + 1)))
    base, extra = divmod(target, n_cases)
    counts = [base + (1 if i < extra else 0) for i in range(n_cases)]
    return [int(min(max(c, 1), slices_per_patient - 1)) for c in counts]


def generate_synthetic_ppmr(root, n_cases, n_controls, seed, slices_per_patient=150):
    """Write a synthetic dataset in the slice layout; returns the root path.

    Controls show smooth random blobs inside an elliptical "brain"; anomalous
    slices of case patients add a localised high-frequency texture patch over
    a contiguous run of slices. The normal:anomaly slice ratio is about 5:1.
    Output is byte-identical for equal arguments.
    """
    if n_cases < 5:
        raise ConfigurationError("n_cases must be >= 5 so that 5-fold CV is possible")
    if n_controls < 0 or slices_per_patient < 2:
        raise ConfigurationError("n_controls must be >= 0 and slices_per_patient >= 2")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = _anomaly_counts(n_cases, n_controls, slices_per_patient)
    patients = []
    case_ids = [f"P{i + 1:03d}" for i in range(n_cases)]
    plan = [(pid, True, None) for pid in case_ids]
    plan += [(f"C{j + 1:03d}", False, case_ids[j % n_cases]) for j in range(n_controls)]
    for idx, (pid, is_case, match) in enumerate(plan):
        rng = np.random.default_rng([int(seed), idx])
        anat = _sample_anatomy(rng)
        anomalous = set()
        patch_track = None
        if is_case:
            n_anom = counts[idx]
            start = int(rng.integers(0, slices_per_patient - n_anom + 1))
            anomalous = set(range(start, start + n_anom))
            ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0.25, 0.6)
            patch_track = (rad * np.cos(ang), rad * np.sin(ang), rng.normal(0, 0.003, 2), rng.uniform(0.18, 0.24))
        pdir = root / ("case" if is_case else "control") / pid
        pdir.mkdir(parents=True, exist_ok=True)
        files = []
        for t in range(slices_per_patient):
            patch = None
            if t in anomalous:
                px, py, v, freq = patch_track
                patch = (px + v[0] * t, py + v[1] * t, 0.5 * t, freq)
            label = "anomaly" if t in anomalous else "normal"
            data = _encode_png(_render(anat, t, slices_per_patient, patch))
            name = f"{t:03d}_{label}.png"
            (pdir / name).write_bytes(data)
            files.append({"file": f"{pdir.parent.name}/{pid}/{name}", "sha256": hashlib.sha256(data).hexdigest()})
        patients.append(
            {
                "patient_id": pid,
                "group": "case" if is_case else "control",
                "matched_case": match,
                "n_normal": slices_per_patient - len(anomalous),
                "n_anomaly": len(anomalous),
                "slices": files,
            }
        )
    write_manifest(root, patients, extra={"generator": "synthetic", "seed": int(seed)})
    return root


def write_manifest(root, patients, extra=None):
    doc = {
        "kind": "slice-dataset",
        "image_shape": list(IMAGE_SHAPE),
        "decode_order": "case then control; patients by id; slices by index",
        "resize_filter": RESIZE_FILTER,
        "patients": patients,
    }
    doc.update(extra or {})
    (Path(root) / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def build_manifest(root):
    """Manifest entries for an existing directory tree (e.g. a real export)."""
    root = Path(root)
    out = []
    for r in load_slice_dataset(root):
        out.append(
            {
                "patient_id": r.patient_id,
                "group": "case" if r.is_case else "control",
                "matched_case": r.matched_case,
                "n_normal": r.n_normal,
                "n_anomaly": r.n_anomaly,
                "slices": [
                    {
                        "file": s.path.relative_to(root).as_posix(),
                        "sha256": hashlib.sha256(s.path.read_bytes()).hexdigest(),
                    }
                    for s in r.slices
                ],
            }
        )
    return out


class SliceSource:
    """Decoded slices for a set of patients, with an access log.

    Every :meth:`subset` call appends ``(purpose, patient_ids)`` to
    ``access_log``, which lets callers audit that held-out patients are only
    read when intended.
    """

    def __init__(self, records):
        self.records = {r.patient_id: r for r in records}
        self._cache = {}
        self.access_log = []

    def _patient_images(self, pid):
        if pid not in self._cache:
            rec = self.records[pid]
            self._cache[pid] = np.stack([read_slice(s.path) for s in rec.slices])
        return self._cache[pid]

    def subset(self, patient_ids, purpose="train") -> Subset:
        patient_ids = list(patient_ids)
        self.access_log.append((purpose, tuple(patient_ids)))
        anomaly_group = GROUP_UNSEEN if purpose == "outer_eval" else GROUP_SEEN
        images, labels, prov, paths = [], [], [], []
        for pid in patient_ids:
            rec = self.records[pid]
            images.append(self._patient_images(pid))
            labels += [s.label for s in rec.slices]
            prov += [pid] * len(rec.slices)
            paths += [str(s.path) for s in rec.slices]
        labels = np.asarray(labels, dtype=np.int64)
        return Subset(
            images=np.concatenate(images) if images else np.zeros((0,) + IMAGE_SHAPE, np.uint8),
            labels=labels,
            groups=np.where(labels == 1, anomaly_group, GROUP_NORMAL),
            provenance=np.asarray(prov),
            paths=np.asarray(paths),
        )
