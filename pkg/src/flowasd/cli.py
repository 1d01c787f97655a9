"""Command-line entry point: ``flowasd {synth,features,calibrate,train,evaluate}``.

Settings come from (lowest to highest precedence) built-in defaults, an optional
``--preset``, an INI ``--config`` file and ``--set section.key=value`` flags.
"""
import argparse
import configparser
import logging
import os
import re
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import pipeline
from .datagen import SyntheticSpec, generate, read_spec
from .errors import ConfigError, FlowASDError
from .evaluation import AGGREGATIONS, write_reports
from .features import FeatureConfig
from .flows import load_checkpoint
from .losses import LOSS_KINDS, LossSpec
from .training import PRESETS, TrainConfig, train

log = logging.getLogger("flowasd")

# (section, key, default, help); an empty default means "derived" as the help explains
KEYS = [
    ("data", "root", "data", "dataset root holding <machine_type>/{train,test}/*.wav"),
    ("data", "machine_type", "", "machine type directory under the root (required)"),
    ("data", "machine_id", "all", "machine ID to train/evaluate, or 'all'"),
    ("data", "outlier_machine_type", "", "take outliers from this machine type instead of the other IDs"),
    ("features", "n_mels", "128", "mel bands"),
    ("features", "frame_length", "1024", "STFT frame length in samples"),
    ("features", "hop_length", "512", "STFT hop in samples"),
    ("features", "window_frames", "auto", "frames per model input; auto = 4 for MAF, 32 for Glow"),
    ("features", "window_hop", "4", "frames between window starts (4 frames apart for both MAF and Glow)"),
    ("features", "fmin", "0", "lowest mel filter edge in Hz"),
    ("features", "fmax", "8000", "highest mel filter edge in Hz"),
    ("model", "preset", "maf_additive", "one of " + ", ".join(sorted(PRESETS))),
    ("model", "hidden_units", "", "MADE hidden units; blank = 512"),
    ("model", "n_blocks", "", "MADE blocks (blank = 4) or Glow blocks (blank = 3)"),
    ("model", "n_steps", "", "Glow steps per block; blank = 12"),
    ("model", "hidden_channels", "", "Glow conditioner channels; blank = 128"),
    ("model", "clamp", "true", "MAF affine: bound scales with the sigmoid clamp (false = raw exp)"),
    ("loss", "kind", "oe_modified", "one of " + ", ".join(LOSS_KINDS)),
    ("loss", "c", "", "NLL threshold; blank = calibrated value, else [calibration] <type>.<preset>"),
    ("loss", "k", "0.5", "outlier weight of oe_modified, in (0, 1)"),
    ("train", "epochs", "100", "training epochs"),
    ("train", "batch_size", "64", "target windows per step"),
    ("train", "optimizer", "", "adam or adamax; blank = adam for MAF, adamax for Glow"),
    ("train", "learning_rate", "", "blank = 1e-4 for MAF, 5e-4 for Glow"),
    ("train", "outlier_fraction", "0.5", "share of each step's samples that are outliers, in [0, 1)"),
    ("train", "warmup_epochs", "5", "calibration epochs of plain NLL training on pooled data"),
    ("train", "clip_norm", "100", "global gradient-norm clip"),
    ("train", "checkpoint_every", "10", "epochs between checkpoints"),
    ("run", "seed", "0", "seed for every random draw"),
    ("eval", "p", "0.1", "pAUC false-positive-rate limit"),
    ("eval", "aggregation", "mean", "window-to-recording score: " + ", ".join(AGGREGATIONS)),
]
DEFAULTS = {(s, k): d for s, k, d, _ in KEYS}
CALIBRATION_FILE = "calibration.txt"


def keys_help():
    lines = ["configuration keys (INI sections; override with --set section.key=value):"]
    for section, key, default, text in KEYS:
        lines.append(f"  {section}.{key:<22} default {default or '-':<14} {text}")
    lines.append("  calibration.<type>.<preset>      per machine type/preset threshold c (preset files)")
    lines.append("\nenvironment: FLOWASD_LOG sets log verbosity (DEBUG, INFO, WARNING).")
    return "\n".join(lines)


def _parser():
    ini = configparser.ConfigParser(interpolation=None)
    ini.optionxform = str
    return ini


def _key_lines(text):
    """Map (section, key) to the line it is defined on, for error messages."""
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
        elif stripped and stripped[0] not in "#;" and section is not None:
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            lines.setdefault((section, key), lineno)
    return lines


def _ini_error(exc, origin):
    if isinstance(exc, configparser.MissingSectionHeaderError):
        return f"{origin}, line {exc.lineno}: key outside any [section]: {exc.line.strip()!r}"
    if isinstance(exc, configparser.ParsingError):
        lineno, line = exc.errors[0]
        return f"{origin}, line {lineno}: cannot parse {line.strip()!r}"
    if isinstance(exc, configparser.DuplicateOptionError):
        return f"{origin}, line {exc.lineno}: duplicate key {exc.section}.{exc.option}"
    if isinstance(exc, configparser.DuplicateSectionError):
        return f"{origin}, line {exc.lineno}: duplicate section [{exc.section}]"
    return f"{origin}: {exc}"


def _merge(values, calibration, ini, text, origin):
    where = _key_lines(text)
    for section in ini.sections():
        for key, value in ini.items(section):
            at = f"{origin}, line {where.get((section, key), '?')}"
            if section == "calibration":
                try:
                    calibration[key] = float(value)
                except ValueError:
                    raise ConfigError(f"{at}: calibration.{key} is not a number: {value!r}") from None
            elif (section, key) in DEFAULTS:
                values[(section, key)] = value.strip()
            else:
                raise ConfigError(f"{at}: unknown key {section}.{key}")


def load_preset(name):
    ref = resources.files("flowasd") / "presets" / f"{name}.preset"
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return ref.read_text()


def build_config(preset=None, config_path=None, sets=(), seed=None):
    """Returns ``(values, calibration)``: a {(section, key): str} map and preset thresholds."""
    values, calibration = dict(DEFAULTS), {}
    sources = []
    if preset:
        sources.append((load_preset(preset), f"preset {preset}"))
    if config_path:
        sources.append((Path(config_path).read_text(), str(config_path)))
    for text, origin in sources:
        ini = _parser()
        try:
            ini.read_string(text, source=origin)
        except configparser.Error as exc:
            raise ConfigError(_ini_error(exc, origin)) from None
        _merge(values, calibration, ini, text, origin)
    for item in sets:
        dotted, sep, value = item.partition("=")
        section, _, key = dotted.strip().partition(".")
        if not sep or not key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if section == "calibration":
            try:
                calibration[key] = float(value)
            except ValueError:
                raise ConfigError(f"--set {dotted}: not a number: {value!r}") from None
        elif (section, key) not in DEFAULTS:
            raise ConfigError(f"unknown key {dotted}")
        else:
            values[(section, key)] = value.strip()
    if seed is not None:
        values[("run", "seed")] = str(seed)
    return values, calibration


class RunConfig:
    """Typed view over the merged key/value settings."""

    def __init__(self, values, calibration, out):
        self.values, self.calibration, self.out = values, calibration, Path(out)

    def get(self, section, key, kind=str, blank=None):
        raw = self.values[(section, key)]
        if raw == "":
            return blank
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return raw.lower() in ("true", "1", "yes")
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {kind.__name__}") from None

    @property
    def machine_type(self):
        value = self.get("data", "machine_type")
        if not value:
            raise ConfigError("data.machine_type is required")
        return value

    @property
    def preset(self):
        value = self.get("model", "preset")
        if value not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {value!r}")
        return value

    @property
    def is_glow(self):
        return PRESETS[self.preset]["kind"] == "glow"

    def feature_config(self):
        wf = self.get("features", "window_frames")
        wf = (32 if self.is_glow else 4) if wf in (None, "auto") else int(wf)
        return FeatureConfig(
            n_mels=self.get("features", "n_mels", int), frame_length=self.get("features", "frame_length", int),
            hop_length=self.get("features", "hop_length", int), window_frames=wf,
            window_hop=self.get("features", "window_hop", int), fmin=self.get("features", "fmin", float),
            fmax=self.get("features", "fmax", float),
        )

    def model_overrides(self):
        fc = self.feature_config()
        overrides = {}
        names = ("n_blocks", "n_steps", "hidden_channels") if self.is_glow else ("hidden_units", "n_blocks")
        for name in names:
            value = self.get("model", name, int)
            if value is not None:
                overrides[name] = value
        if self.is_glow:
            overrides["input_shape"] = (1, fc.window_frames, fc.n_mels)
        elif not self.get("model", "clamp", bool):
            overrides["clamp"] = False
        return overrides

    def loss_spec(self, c=None):
        kind = self.get("loss", "kind")
        if kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {kind!r}")
        try:
            return LossSpec(kind, c if kind != "nll_only" else None, self.get("loss", "k", float))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, c=None):
        return TrainConfig(
            model_preset=self.preset, epochs=self.get("train", "epochs", int),
            batch_size=self.get("train", "batch_size", int), optimizer=self.get("train", "optimizer"),
            learning_rate=self.get("train", "learning_rate", float), loss=self.loss_spec(c),
            seed=self.get("run", "seed", int), outlier_fraction=self.get("train", "outlier_fraction", float),
            warmup_epochs=self.get("train", "warmup_epochs", int), clip_norm=self.get("train", "clip_norm", float),
            checkpoint_every=self.get("train", "checkpoint_every", int), model_overrides=self.model_overrides(),
        )

    @property
    def calibration_key(self):
        return f"{self.machine_type}.{self.preset}"

    def threshold(self):
        """Explicit loss.c, else the calibration file under --out, else the preset table."""
        explicit = self.get("loss", "c", float)
        if explicit is not None:
            return explicit
        stored = read_calibration(self.out / CALIBRATION_FILE)
        if self.calibration_key in stored:
            return stored[self.calibration_key]
        return self.calibration.get(self.calibration_key)

    def ids(self, data):
        wanted = self.get("data", "machine_id")
        if wanted in (None, "all"):
            return data.ids
        if wanted not in data.ids:
            raise ConfigError(f"machine ID {wanted!r} not found; available: {data.ids}")
        return [wanted]


def read_calibration(path):
    path = Path(path)
    if not path.exists():
        return {}
    table = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected '<type>.<preset> = c'")
        table[key.strip()] = float(value)
    return table


def write_calibration(path, key, c):
    table = read_calibration(path)
    table[key] = c
    Path(path).write_text("".join(f"{k} = {v!r}\n" for k, v in sorted(table.items())))


# -- commands ------------------------------------------------------------------


def cmd_synth(args, run):
    spec = read_spec(args.spec) if args.spec else SyntheticSpec(seed=run.get("run", "seed", int))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    base = generate(spec, run.out)
    total = spec.n_ids * (spec.n_train + spec.n_test_normal + spec.n_test_anomaly)
    print(f"wrote {total} recordings to {base}")


def cmd_features(args, run):
    cache = run.out / "features"
    written, errors = pipeline.extract_features(run.get("data", "root"), run.machine_type, run.feature_config(),
                                                cache)
    print(f"wrote {written} feature caches to {cache / run.machine_type}")
    if errors:
        for message in errors:
            print(f"error: {message}", file=sys.stderr)
        raise FlowASDError(f"{len(errors)} recording(s) failed")


def _load(run, machine_type=None):
    return pipeline.load_cached(run.out / "features", machine_type or run.machine_type, run.feature_config())


def cmd_calibrate(args, run):
    data = _load(run)
    cfg = run.train_config()
    result = pipeline.calibrate_type(data, cfg, run.feature_config(), run.out / "calibration" / run.calibration_key)
    write_calibration(run.out / CALIBRATION_FILE, run.calibration_key, result.c)
    print(f"{run.calibration_key} = {result.c!r}  (warmup {result.epochs} epochs, "
          f"batch NLL range [{min(result.batch_means)!r}, {max(result.batch_means)!r}])")


def cmd_train(args, run):
    kind = run.get("loss", "kind")
    c = run.threshold() if kind != "nll_only" else None
    if kind != "nll_only" and c is None:
        raise ConfigError(f"no threshold c for {run.calibration_key}: run 'calibrate' or set loss.c")
    cfg = run.train_config(c)
    data = _load(run)
    outlier_type = run.get("data", "outlier_machine_type")
    outlier_data = _load(run, outlier_type) if outlier_type and cfg.loss.uses_outliers else None
    fc = run.feature_config()
    failed = 0
    for mid in run.ids(data):
        target, outliers = pipeline.target_and_outliers(data, mid, fc, outlier_data)
        if not cfg.loss.uses_outliers:
            outliers = None
        run_dir = run.out / "models" / data.machine_type / f"id_{mid}"
        log.info("training %s id %s with %s", data.machine_type, mid, cfg.loss.kind)
        result = train(target, outliers, cfg, run_dir)
        last = result.manifest.epochs[-1] if result.manifest.epochs else None
        status = result.manifest.status
        print(f"id {mid}: {status}, {len(result.manifest.epochs)} epochs"
              + (f", final target NLL {last.target_nll:.4f}" if last else "")
              + (f", failed at {result.manifest.failed_layer}" if result.failed else ""))
        failed += result.failed
    if failed:
        raise FlowASDError(f"{failed} run(s) failed; last good checkpoints kept")


def cmd_evaluate(args, run):
    data = _load(run)
    fc = run.feature_config()
    reports = []
    ids = run.ids(data)
    if args.checkpoint and len(ids) != 1:
        raise ConfigError("--checkpoint needs a single data.machine_id")
    for mid in ids:
        path = Path(args.checkpoint) if args.checkpoint else (
            run.out / "models" / data.machine_type / f"id_{mid}" / "checkpoint.nfad")
        if not path.exists():
            raise ConfigError(f"no checkpoint for ID {mid} at {path}")
        model = load_checkpoint(path).model
        reports.append(pipeline.evaluate_model(model, data, mid, fc, run.get("eval", "p", float),
                                      run.get("eval", "aggregation")))
    out = write_reports(run.out / "reports", reports)
    print((out.parent / "report.txt").read_text(), end="")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset in the DCASE layout"),
    "features": (cmd_features, "extract log-Mel feature caches for one machine type"),
    "calibrate": (cmd_calibrate, "estimate the threshold c from pooled machine-type data"),
    "train": (cmd_train, "train one model per machine ID"),
    "evaluate": (cmd_evaluate, "score test recordings and write AUC/pAUC reports"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowasd", description="Flow-based anomalous sound detection with outlier exposure.",
        epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--preset", help="named preset bundled with the package, e.g. dcase2020")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name == "synth":
            p.add_argument("--spec", help="synthetic spec file of 'key = value' lines")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (single machine ID only)")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("FLOWASD_LOG", "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        values, calibration = build_config(args.preset, args.config, args.set, args.seed)
        run = RunConfig(values, calibration, args.out)
        COMMANDS[args.command][0](args, run)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FlowASDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
