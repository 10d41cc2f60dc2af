"""Static figures from run directories: loss curves, schedules, per-arm Dice boxplots."""
import csv
import json
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from . import Config
from . import Errors
from .Engine import MODES
from .Losses import lr_schedule, ramp_weight

# PNG metadata without the Software key keeps the bytes identical across runs.
PNG_METADATA = {'Software': None}
LOSS_COLUMNS = ('L_seg', 'L_trans', 'L_con', 'L_meta_train', 'L_meta_test')

def read_log(run_dir):
    path = os.path.join(run_dir, 'log.csv')
    try:
        with open(path, newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as ex:
        raise Errors.ConfigError('No training log found: {}'.format(ex), context={'run_dir': run_dir})
    if not rows:
        raise Errors.ConfigError('Training log is empty', context={'path': path})
    return rows

def _column(rows, name):
    values = [float(r[name]) if r.get(name) not in (None, '') else np.nan for r in rows]
    return np.array(values)

def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path

def plot_losses(rows, path):
    epochs = _column(rows, 'epoch')
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(10, 4))
    for name in LOSS_COLUMNS:
        values = _column(rows, name)
        if not np.all(np.isnan(values)):
            ax.plot(epochs, values, label=name)
    ax.set_xlabel('epoch')
    ax.set_ylabel('loss')
    ax.legend(loc='upper right', fontsize='small')
    dice = _column(rows, 'val_dice')
    bx.plot(epochs, dice, marker='.', color='tab:green')
    bx.set_xlabel('epoch')
    bx.set_ylabel('validation Dice')
    bx.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)

def plot_schedules(schedule, epochs, path):
    """lambda(t) and lr(t) on a fine grid, so the warmup knee is visible."""
    t = np.linspace(0, epochs, 20 * epochs + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, [ramp_weight(v, schedule) for v in t], color='tab:blue', label='lambda_con = lambda_trans')
    ax.set_xlabel('epoch')
    ax.set_ylabel('loss weight')
    lx = ax.twinx()
    lx.plot(t, [lr_schedule(v, schedule) for v in t], color='tab:orange', label='learning rate')
    lx.axvline(schedule.warmup_epochs, color='grey', linestyle=':', linewidth=1)
    lx.set_ylabel('learning rate')
    handles = ax.get_legend_handles_labels()[0] + lx.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], loc='center right', fontsize='small')
    fig.tight_layout()
    return _save(fig, path)

def collect_arms(root):
    """Mean Dice of every finished run below `root`, grouped by ablation mode."""
    scores = {}
    for current, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        if 'report.json' not in files or 'config.json' not in files:
            continue
        with open(os.path.join(current, 'config.json')) as f:
            mode = Config.loads(f.read()).trainer.mode
        with open(os.path.join(current, 'report.json')) as f:
            scores.setdefault(mode, []).append(float(json.load(f)['mean_dice']))
    return {mode: scores[mode] for mode in MODES if mode in scores}

def plot_arms(scores, path):
    if not scores:
        raise Errors.ConfigError('No finished runs to compare')
    names = list(scores)
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 4))
    ax.boxplot([100 * np.array(scores[n]) for n in names])
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names)
    ax.set_ylabel('mean Dice (%)')
    for index, name in enumerate(names, start=1):
        ax.text(index, ax.get_ylim()[0], 'n={}'.format(len(scores[name])), ha='center', va='bottom', fontsize='small')
    fig.tight_layout()
    return _save(fig, path)

def plot_run(run_dir, out_dir):
    """Every figure `run_dir` supports; a directory of runs gets the arm boxplot."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if os.path.exists(os.path.join(run_dir, 'log.csv')):
        rows = read_log(run_dir)
        written.append(plot_losses(rows, os.path.join(out_dir, 'losses.png')))
        cfg = Config.load(os.path.join(run_dir, 'config.json')) if os.path.exists(
            os.path.join(run_dir, 'config.json')) else Config.RunConfig()
        written.append(plot_schedules(cfg.trainer.schedule, cfg.trainer.epochs, os.path.join(out_dir, 'schedules.png')))
    scores = collect_arms(run_dir)
    if scores:
        written.append(plot_arms(scores, os.path.join(out_dir, 'arms.png')))
    if not written:
        raise Errors.ConfigError('Nothing to plot: no training log or finished runs', context={'run_dir': run_dir})
    return written
