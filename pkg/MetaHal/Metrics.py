"""Dice / average surface distance, connected-component post-processing and reports."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from . import Errors
from .Nets import segment
from .SynthData import FOREGROUND, zscore
from .Tensor import Tensor, no_grad

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)

def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise Errors.ShapeError('Masks must share a shape', context={'pred': pred.shape, 'gt': gt.shape})
    return pred, gt

def dice(pred, gt):
    """2|P and G| / (|P| + |G|); two empty masks score 1."""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total

def boundary(mask):
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, FOUR_CONNECTED, border_value=0)

def asd(pred, gt, class_id=None):
    """Symmetric mean of boundary-to-boundary Euclidean distances, in pixels."""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise Errors.MetricError('ASD is undefined for an empty mask', class_id=class_id,
                                 context={'pred_pixels': int(pred.sum()), 'gt_pixels': int(gt.sum())})
    a = np.argwhere(boundary(pred)).astype(np.float64)
    b = np.argwhere(boundary(gt)).astype(np.float64)
    dist = cdist(a, b)
    return float((dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(a) + len(b)))

def largest_component(label_map):
    """Keeps the largest 4-connected component of every foreground class.

    Ties go to the component whose first pixel comes first in scanline order.
    """
    label_map = np.asarray(label_map)
    out = label_map.copy()
    for cls in np.unique(label_map):
        if cls == 0:
            continue
        mask = label_map == cls
        components, count = ndimage.label(mask, structure=FOUR_CONNECTED)
        if count <= 1:
            continue
        sizes = np.bincount(components.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[mask & (components != keep)] = 0
    return out

@dataclass
class MetricsReport:
    class_names: list
    dice_mean: dict
    dice_std: dict
    asd_mean: dict
    asd_std: dict
    mean_dice: float
    mean_asd: float
    subjects: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    model: str = 'student'

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['subject'] + ['dice_' + n for n in self.class_names] + ['asd_' + n for n in self.class_names])
        for row in self.subjects:
            writer.writerow([row['subject']] + ['{:.6f}'.format(v) for v in row['dice']]
                            + ['{:.6f}'.format(v) for v in row['asd']])
        return buffer.getvalue()

    def render_table(self):
        """Dice (%) and ASD (pixels) as mean_std per class plus the average."""
        names = list(self.class_names) + ['Average']
        dice_cells = ['{:.1f}_{:.1f}'.format(100 * self.dice_mean[n], 100 * self.dice_std[n]) for n in self.class_names]
        asd_cells = ['{:.1f}_{:.1f}'.format(self.asd_mean[n], self.asd_std[n]) for n in self.class_names]
        dice_cells.append('{:.1f}'.format(100 * self.mean_dice))
        asd_cells.append('{:.1f}'.format(self.mean_asd))
        width = max(10, *(len(c) + 2 for c in dice_cells + asd_cells))
        lines = ['{:<6}'.format(self.model[:6]) + ''.join('{:>{}}'.format(n, width) for n in names),
                 '{:<6}'.format('Dice') + ''.join('{:>{}}'.format(c, width) for c in dice_cells),
                 '{:<6}'.format('ASD') + ''.join('{:>{}}'.format(c, width) for c in asd_cells)]
        lines.extend('note: ' + note for note in self.notes)
        return '\n'.join(lines)

def report_from_predictions(predictions, gt_labels, subjects, model='student', class_names=FOREGROUND):
    """Aggregates per-subject Dice/ASD into class means and cross-subject deviations."""
    predictions = np.asarray(predictions)
    gt_labels = np.asarray(gt_labels)
    if predictions.shape != gt_labels.shape:
        raise Errors.ShapeError('Predictions and labels must share a shape',
                                context={'pred': predictions.shape, 'gt': gt_labels.shape})
    sentinel = float(np.hypot(*predictions.shape[1:]))
    rows, notes = [], []
    for pred, gt, subject in zip(predictions, gt_labels, subjects):
        dices, asds = [], []
        for cls, name in enumerate(class_names, start=1):
            p, g = pred == cls, gt == cls
            dices.append(dice(p, g))
            try:
                asds.append(asd(p, g, class_id=cls))
            except Errors.MetricError:
                asds.append(sentinel)
                notes.append('subject {} class {}: empty mask, ASD sentinel {:.3f}'.format(int(subject), name, sentinel))
        rows.append({'subject': int(subject), 'dice': dices, 'asd': asds})
    dice_table = np.array([r['dice'] for r in rows]).reshape(len(rows), len(class_names))
    asd_table = np.array([r['asd'] for r in rows]).reshape(len(rows), len(class_names))
    names = list(class_names)
    return MetricsReport(
        class_names=names,
        dice_mean={n: float(dice_table[:, i].mean()) for i, n in enumerate(names)},
        dice_std={n: float(dice_table[:, i].std()) for i, n in enumerate(names)},
        asd_mean={n: float(asd_table[:, i].mean()) for i, n in enumerate(names)},
        asd_std={n: float(asd_table[:, i].std()) for i, n in enumerate(names)},
        mean_dice=float(dice_table.mean()),
        mean_asd=float(asd_table.mean()),
        subjects=rows,
        notes=notes,
        model=model,
    )

def predict(params, images, batch_size=16):
    """Argmax label maps for [n,1,H,W] images (z-scored per image on the way in)."""
    images = zscore(images)
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = segment(params, Tensor(images[start:start + batch_size]))
            outputs.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(outputs) if outputs else np.zeros((0,) + images.shape[2:], dtype=np.uint8)

def evaluate(params, model, test, gt_labels, batch_size=16):
    """Predict, keep the largest component per class, then score against `gt_labels`."""
    predictions = predict(params, test.images, batch_size)
    processed = np.stack([largest_component(p) for p in predictions]) if len(predictions) else predictions
    return report_from_predictions(processed, gt_labels, test.subjects, model=model)
