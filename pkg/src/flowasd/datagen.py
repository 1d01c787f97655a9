"""Synthetic machine sounds with a type-wide shared component and per-ID specific components.

Every recording of machine ID i is ``shared + specific_i + background``, where
the shared template is common to all IDs of a machine type and independent of
the specific ones by construction. Templates are harmonic stacks plus a band of
filtered noise, so the structure is visible in log-Mel space.
"""
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .errors import SpecError
from .features import SAMPLE_RATE, write_wav

ANOMALY_KINDS = ("swap", "tone", "noise")
_GRID_HZ = np.linspace(0.0, SAMPLE_RATE / 2, 801)


@dataclass(frozen=True)
class Template:
    """A harmonic stack at ``f0`` plus a noise band, both scaled by ``level``."""

    f0: float
    n_harmonics: int
    rolloff: float
    noise_center_hz: float
    noise_bandwidth_hz: float
    noise_level: float
    level: float = 1.0

    def harmonic_amplitudes(self):
        h = np.arange(1, self.n_harmonics + 1)
        keep = h * self.f0 < 0.45 * SAMPLE_RATE
        return h[keep], self.rolloff ** (h[keep] - 1.0)

    def signature(self):
        """Expected magnitude profile on a fixed frequency grid, for distance checks."""
        profile = np.zeros_like(_GRID_HZ)
        for h, a in zip(*self.harmonic_amplitudes()):
            profile += a * np.exp(-0.5 * ((_GRID_HZ - h * self.f0) / 15.0) ** 2)
        half = self.noise_bandwidth_hz / 2
        band = np.abs(_GRID_HZ - self.noise_center_hz) <= half
        profile[band] += self.noise_level
        return profile / max(np.linalg.norm(profile), 1e-12)

    def render(self, n, rng, jitter, level=None, f0_spread=0.01):
        level = self.level if level is None else level
        t = np.arange(n) / SAMPLE_RATE
        f0 = self.f0 * (1.0 + f0_spread * jitter * rng.standard_normal())
        gain = 1.0 + 0.1 * jitter * rng.standard_normal()
        am_rate, am_depth = rng.uniform(0.5, 3.0), 0.3 * jitter
        envelope = 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
        x = np.zeros(n)
        for h, a in zip(*self.harmonic_amplitudes()):
            if h * f0 < 0.45 * SAMPLE_RATE:
                x += a * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        x /= math.sqrt(max(np.sum(self.harmonic_amplitudes()[1] ** 2) / 2, 1e-12))
        if self.noise_level > 0:
            lo = max(self.noise_center_hz - self.noise_bandwidth_hz / 2, 20.0)
            hi = min(self.noise_center_hz + self.noise_bandwidth_hz / 2, 0.49 * SAMPLE_RATE)
            sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
            band = sosfilt(sos, rng.standard_normal(n))
            x += self.noise_level * band / max(band.std(), 1e-12)
        return level * gain * envelope * x


def shared_template(seed):
    rng = np.random.default_rng([seed, 11])
    return Template(
        f0=float(rng.uniform(80.0, 160.0)), n_harmonics=30, rolloff=float(rng.uniform(0.85, 0.92)),
        noise_center_hz=float(rng.uniform(600.0, 1500.0)), noise_bandwidth_hz=float(rng.uniform(800.0, 1600.0)),
        noise_level=0.5,
    )


def specific_template(f0, level):
    """Fully determined by ``f0`` and ``level``, so equal fundamentals give identical templates."""
    return Template(f0=float(f0), n_harmonics=6, rolloff=0.75, noise_center_hz=float(3.5 * f0),
                    noise_bandwidth_hz=float(0.5 * f0), noise_level=0.3, level=level)


@dataclass(frozen=True)
class SyntheticSpec:
    machine_type: str = "synth"
    n_ids: int = 3
    n_train: int = 40
    n_test_normal: int = 10
    n_test_anomaly: int = 10
    duration_s: float = 2.0
    seed: int = 0
    shared_seed: int = 1
    specific_seed: int = 2
    specific_f0: tuple = ()
    specific_level: float = 0.2
    id_spacing: float = 1.05
    specific_spread: float = 0.03
    background_level: float = 0.05
    jitter: float = 1.0
    anomaly: str = "swap"
    magnitude: float = 1.0
    gain: float = 0.1
    min_template_distance: float = 0.05

    def __post_init__(self):
        if self.n_ids < 1 or self.n_train < 1 or self.n_test_normal < 0 or self.n_test_anomaly < 0:
            raise SpecError("n_ids and n_train must be >= 1 and test counts >= 0")
        if self.duration_s <= 0:
            raise SpecError("duration_s must be positive")
        if self.anomaly not in ANOMALY_KINDS:
            raise SpecError(f"anomaly must be one of {ANOMALY_KINDS}, got {self.anomaly!r}")
        if self.anomaly == "swap" and self.n_ids < 2 and self.n_test_anomaly:
            raise SpecError("swap anomalies need at least two IDs")
        if self.magnitude < 0 or self.specific_level <= 0 or self.specific_spread < 0:
            raise SpecError("magnitude and specific_spread must be >= 0, specific_level > 0")
        if self.id_spacing <= 1.0:
            raise SpecError("id_spacing must exceed 1")
        if self.specific_f0 and len(self.specific_f0) != self.n_ids:
            raise SpecError(f"specific_f0 lists {len(self.specific_f0)} values for {self.n_ids} IDs")

    @property
    def n_samples(self):
        return int(round(self.duration_s * SAMPLE_RATE))

    def shared(self):
        return shared_template(self.shared_seed)

    def fundamentals(self):
        if self.specific_f0:
            return [float(f) for f in self.specific_f0]
        base = np.random.default_rng([self.specific_seed, 13]).uniform(400.0, 600.0)
        return [float(base * self.id_spacing**i) for i in range(self.n_ids)]

    def specifics(self):
        return [specific_template(f0, self.specific_level) for f0 in self.fundamentals()]

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw, lineno):
    kinds = {f.name: f.type for f in fields(SyntheticSpec)}
    if name not in kinds:
        raise SpecError(f"line {lineno}: unknown key {name!r}")
    kind = kinds[name]
    try:
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind in (int, float):
            return kind(raw)
        return raw
    except ValueError as exc:
        raise SpecError(f"line {lineno}: bad value for {name}: {raw!r}") from exc


def parse_spec(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. Errors name the line."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw, lineno)
    return SyntheticSpec(**values)


def read_spec(path):
    return parse_spec(Path(path).read_text())


def template_distance(a, b):
    return float(np.linalg.norm(a.signature() - b.signature()))


def check_spec(spec):
    specifics = spec.specifics()
    for i in range(len(specifics)):
        for j in range(i + 1, len(specifics)):
            d = template_distance(specifics[i], specifics[j])
            if d < spec.min_template_distance:
                raise SpecError(f"specific templates of IDs {i} and {j} are too close (distance {d:.4f})")
    for i, s in enumerate(specifics):
        if template_distance(s, spec.shared()) < spec.min_template_distance:
            raise SpecError(f"specific template of ID {i} coincides with the shared template")


def render_recording(spec, machine_index, rng, anomalous=False):
    """One recording of machine ``machine_index``; anomalies apply ``spec.anomaly`` at ``spec.magnitude``."""
    n = spec.n_samples
    specifics = spec.specifics()
    own = specifics[machine_index]
    x = spec.shared().render(n, rng, spec.jitter)
    m = spec.magnitude if anomalous else 0.0
    if anomalous and spec.anomaly == "swap":
        other = specifics[(machine_index + 1) % spec.n_ids]
        x += own.render(n, rng, spec.jitter, own.level * (1.0 - min(m, 1.0)), spec.specific_spread)
        x += other.render(n, rng, spec.jitter, other.level * min(m, 1.0), spec.specific_spread)
    else:
        x += own.render(n, rng, spec.jitter, f0_spread=spec.specific_spread)
    x += spec.background_level * rng.standard_normal(n)
    if anomalous and spec.anomaly == "tone":
        freq = rng.uniform(1500.0, 6000.0)
        t = np.arange(n) / SAMPLE_RATE
        x += m * spec.specific_level * math.sqrt(2) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    elif anomalous and spec.anomaly == "noise":
        x += m * spec.specific_level * rng.standard_normal(n)
    return spec.gain * x


def machine_ids(spec):
    return [f"{2 * i:02d}" for i in range(spec.n_ids)]


def generate(spec, root):
    """Write ``<root>/<machine_type>/{train,test}`` WAVs plus ``spec.txt``; returns the type directory."""
    check_spec(spec)
    base = Path(root) / spec.machine_type
    for split in ("train", "test"):
        (base / split).mkdir(parents=True, exist_ok=True)
    for i, mid in enumerate(machine_ids(spec)):
        plan = [("train", "normal", k) for k in range(spec.n_train)]
        plan += [("test", "normal", k) for k in range(spec.n_test_normal)]
        plan += [("test", "anomaly", k) for k in range(spec.n_test_anomaly)]
        for seq, (split, label, _) in enumerate(plan):
            rng = np.random.default_rng([spec.seed, spec.shared_seed, i, seq])
            x = render_recording(spec, i, rng, anomalous=label == "anomaly")
            if np.max(np.abs(x)) >= 1.0:
                raise SpecError(f"gain {spec.gain} clips recording {seq} of ID {mid}")
            write_wav(base / split / f"{label}_id_{mid}_{seq:08d}.wav", x)
    (base / "spec.txt").write_text(spec.to_text() + _template_text(spec))
    return base


def _template_text(spec):
    lines = [f"# shared template: {asdict(spec.shared())}"]
    lines += [f"# specific template id {mid}: {asdict(t)}" for mid, t in zip(machine_ids(spec), spec.specifics())]
    return "\n".join(lines) + "\n"


def generate_cross_type(spec_a, spec_b, root):
    """Two machine types under one root; their shared templates must differ."""
    if spec_a.machine_type == spec_b.machine_type:
        raise SpecError("cross-type datasets need distinct machine_type names")
    d = template_distance(spec_a.shared(), spec_b.shared())
    if d < max(spec_a.min_template_distance, spec_b.min_template_distance):
        raise SpecError(f"shared templates are not disjoint (distance {d:.4f})")
    return generate(spec_a, root), generate(spec_b, root)


def other_type(spec, machine_type="synth_b", shared_seed=None, specific_seed=None):
    """A spec for a different machine type: new shared template and new specific templates."""
    return replace(spec, machine_type=machine_type,
                   shared_seed=spec.shared_seed + 100 if shared_seed is None else shared_seed,
                   specific_seed=spec.specific_seed + 100 if specific_seed is None else specific_seed,
                   specific_f0=())
