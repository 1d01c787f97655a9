"""Glue between the dataset layout, feature windows, training and evaluation for one machine type."""
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .evaluation import evaluate_scores, score_windows
from .features import extract_logmel, load_wav, make_windows, read_feature_cache, scan_dataset, write_feature_cache
from .losses import calibrate
from .training import train

CACHE_SUFFIX = ".nffc"


@dataclass
class Item:
    entry: object
    logmel: object


@dataclass
class MachineData:
    """Log-Mel spectrograms of one machine type, grouped by split and machine ID (sorted by path)."""

    machine_type: str
    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    @property
    def ids(self):
        return sorted(self.train)


def cache_path(cache_root, entry):
    return Path(cache_root) / entry.machine_type / entry.split / (Path(entry.path).stem + CACHE_SUFFIX)


def extract_features(root, machine_type, feature_cfg, cache_root):
    """Write one feature cache per recording. Returns ``(n_written, errors)``; errors are per-file messages."""
    entries = scan_dataset(root, machine_type)
    if not entries:
        raise FormatError(f"no recordings (0 found) under {Path(root) / machine_type}/{{train,test}}")
    errors = []
    written = 0
    for entry in entries:
        try:
            rec = load_wav(entry.path, machine_type, entry.machine_id, entry.label)
            path = cache_path(cache_root, entry)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_feature_cache(path, extract_logmel(rec, feature_cfg), feature_cfg, entry)
            written += 1
        except (FormatError, ValueError) as exc:
            errors.append(str(exc))
    return written, errors


def _group(data, entry, logmel):
    split = data.train if entry.split == "train" else data.test
    split.setdefault(entry.machine_id, []).append(Item(entry, logmel))


def load_machine(root, machine_type, feature_cfg):
    """Compute log-Mel spectrograms straight from the WAV files."""
    data = MachineData(machine_type)
    for entry in scan_dataset(root, machine_type):
        rec = load_wav(entry.path, machine_type, entry.machine_id, entry.label)
        _group(data, entry, extract_logmel(rec, feature_cfg))
    return data


def load_cached(cache_root, machine_type, feature_cfg=None):
    """Read feature caches; spectral settings must match ``feature_cfg`` when given."""
    data = MachineData(machine_type)
    paths = sorted((Path(cache_root) / machine_type).glob(f"*/*{CACHE_SUFFIX}"))
    if not paths:
        raise FormatError(f"no feature caches under {Path(cache_root) / machine_type}")
    for path in paths:
        logmel, cfg, entry = read_feature_cache(path)
        if feature_cfg is not None and (cfg.n_mels, cfg.frame_length, cfg.hop_length) != (
                feature_cfg.n_mels, feature_cfg.frame_length, feature_cfg.hop_length):
            raise ConfigError(f"{path}: cached with a different spectral configuration")
        _group(data, entry, logmel)
    for split in (data.train, data.test):
        for items in split.values():
            items.sort(key=lambda it: it.entry.path)
    return data


def window_matrix(items, feature_cfg):
    return np.concatenate([make_windows(it.logmel, feature_cfg.window_frames, feature_cfg.window_hop).values
                           for it in items])


def target_and_outliers(data, machine_id, feature_cfg, outlier_data=None):
    """Training windows of ``machine_id`` and, as outliers, every other ID of the same type.

    With ``outlier_data`` the outliers are all training windows of that other machine type instead.
    """
    target = window_matrix(data.train[machine_id], feature_cfg)
    if outlier_data is not None:
        items = [it for mid in outlier_data.ids for it in outlier_data.train[mid]]
    else:
        items = [it for mid in data.ids if mid != machine_id for it in data.train[mid]]
    outliers = window_matrix(items, feature_cfg) if items else None
    return target, outliers


def pooled_windows(data, feature_cfg):
    return window_matrix([it for mid in data.ids for it in data.train[mid]], feature_cfg)


def calibrate_type(data, cfg, feature_cfg, out_dir=None):
    return calibrate(pooled_windows(data, feature_cfg), cfg, out_dir)


def evaluate_model(model, data, machine_id, feature_cfg, p=0.1, aggregation="mean"):
    scores = []
    for it in data.test.get(machine_id, []):
        windows = make_windows(it.logmel, feature_cfg.window_frames, feature_cfg.window_hop)
        scores.append(score_windows(model, windows, Path(it.entry.path).stem, it.entry.label, it.entry.path,
                                    aggregation))
    return evaluate_scores(scores, data.machine_type, machine_id, p)


def run_machine_type(data, cfg, feature_cfg, ids=None, outlier_data=None, c=None, out_dir=None, p=0.1,
                     aggregation="mean"):
    """Train and evaluate one model per machine ID. Returns ``(reports, train results)``.

    ``c`` fills in the loss threshold when the config's loss needs one and has none.
    """
    if c is not None and cfg.loss.uses_outliers:
        cfg = replace(cfg, loss=replace(cfg.loss, c=float(c)))
    reports, results = [], []
    for mid in ids or data.ids:
        target, outliers = target_and_outliers(data, mid, feature_cfg, outlier_data)
        run_dir = Path(out_dir) / data.machine_type / f"id_{mid}" if out_dir is not None else None
        result = train(target, outliers, cfg, run_dir)
        results.append(result)
        reports.append(evaluate_model(result.model, data, mid, feature_cfg, p, aggregation))
    return reports, results
