"""Run configuration: one flat key-value namespace binding every module.

Configuration files are plain text, one ``key = value`` per line with ``#``
comments; command lines override with repeated ``--set key=value``. Every
value is validated by the owning dataclass before any work starts, and the
effective configuration serializes canonically (sorted keys) so it can be
echoed into output artifacts and re-parsed to an equal RunConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .dataio import ConfigurationError, SyntheticSpec
from .evaluation import validate_thresholds
from .inference import InferenceConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unusable configuration input; message names the offending key."""


def _parse_bool(text: str) -> bool:
    if text in ("true", "True", "1"):
        return True
    if text in ("false", "False", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type converter, default)
_SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "data.num_classes": (int, 5),
    "data.feature_dim": (int, 16),
    "data.frames_per_video": (int, 100),
    "data.videos_per_class": (int, 40),
    "data.segments_min": (int, 1),
    "data.segments_max": (int, 2),
    "data.segment_len_min": (int, 8),
    "data.segment_len_max": (int, 14),
    "data.flank_min": (int, 4),
    "data.flank_max": (int, 8),
    "data.separation": (float, 3.0),
    "data.context_offset": (float, 1.0),
    "data.noise": (float, 0.3),
    "model.attention_hidden": (int, 64),
    "model.cvae_hidden": (int, 64),
    "model.latent_dim": (int, 32),
    "model.prior_r": (float, 1.0),
    "model.obs_sigma": (float, 1.0),
    "train.epochs": (int, 60),
    "train.batch_size": (int, 16),
    "train.learning_rate": (float, 1e-3),
    "train.alternation_period": (int, 1),
    "train.warmup_epochs": (int, 15),
    "train.frames_per_video": (int, 400),
    "loss.alpha": (float, 0.03),
    "loss.beta": (float, 0.1),
    "loss.gamma1": (float, 0.5),
    "loss.gamma2": (float, 0.1),
    "loss.mc_samples": (int, 1),
    "loss.smooth_sigma": (float, 2.0),
    "infer.attention_threshold": (float, 0.5),
    "infer.eta": (float, 0.25),
    "infer.nms_iou": (float, 0.5),
    "infer.max_frames": (int, 400),
    "infer.class_prob_floor": (float, 0.1),
    "split.train_fraction": (float, 0.7),
    "split.seed": (int, 1234),
    "eval.thresholds": (str, "0.1:0.1:0.9"),
    "eval.tstar": (float, 0.5),
    "paths.dataset": (str, ""),
    "paths.checkpoint": (str, ""),
    "paths.proposals": (str, ""),
    "paths.metrics": (str, ""),
    "paths.log": (str, ""),
}


def parse_threshold_list(text: str) -> list[float]:
    """Either 'start:step:stop' (inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"threshold range must be start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("threshold range step must be positive")
        values = []
        v = start
        while v <= stop + 1e-9:
            values.append(round(v, 10))
            v += step
    else:
        values = [float(p) for p in text.split(",") if p.strip()]
    return validate_thresholds(values)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse key = value lines into a raw string map; unknown keys rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


@dataclass(frozen=True)
class RunConfig:
    """Validated union of all module configurations."""

    seed: int
    data: SyntheticSpec
    model: ModelConfig
    train: TrainConfig
    infer: InferenceConfig
    split_fraction: float
    split_seed: int
    eval_thresholds: str
    eval_tstar: float
    paths: tuple  # ((key, value), ...) for the five path slots

    @property
    def weights(self) -> LossWeights:
        return self.train.weights

    def path(self, name: str) -> str:
        return dict(self.paths)[name]

    def thresholds(self) -> list[float]:
        return parse_threshold_list(self.eval_thresholds)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_text(self) -> str:
        values = {
            "seed": self.seed,
            "data.num_classes": self.data.num_classes,
            "data.feature_dim": self.data.feature_dim,
            "data.frames_per_video": self.data.frames_per_video,
            "data.videos_per_class": self.data.videos_per_class,
            "data.segments_min": self.data.segments_min,
            "data.segments_max": self.data.segments_max,
            "data.segment_len_min": self.data.segment_len_min,
            "data.segment_len_max": self.data.segment_len_max,
            "data.flank_min": self.data.flank_min,
            "data.flank_max": self.data.flank_max,
            "data.separation": self.data.separation,
            "data.context_offset": self.data.context_offset,
            "data.noise": self.data.noise,
            "model.attention_hidden": self.model.attention_hidden,
            "model.cvae_hidden": self.model.cvae_hidden,
            "model.latent_dim": self.model.latent_dim,
            "model.prior_r": self.model.prior_r,
            "model.obs_sigma": self.model.obs_sigma,
            "train.epochs": self.train.epochs,
            "train.batch_size": self.train.batch_size,
            "train.learning_rate": self.train.learning_rate,
            "train.alternation_period": self.train.alternation_period,
            "train.warmup_epochs": self.train.warmup_epochs,
            "train.frames_per_video": self.train.frames_per_video,
            "loss.alpha": self.weights.alpha,
            "loss.beta": self.weights.beta,
            "loss.gamma1": self.weights.gamma1,
            "loss.gamma2": self.weights.gamma2,
            "loss.mc_samples": self.weights.mc_samples,
            "loss.smooth_sigma": self.weights.smooth_sigma,
            "infer.attention_threshold": self.infer.attention_threshold,
            "infer.eta": self.infer.eta,
            "infer.nms_iou": self.infer.nms_iou,
            "infer.max_frames": self.infer.max_frames,
            "infer.class_prob_floor": self.infer.class_prob_floor,
            "split.train_fraction": self.split_fraction,
            "split.seed": self.split_seed,
            "eval.thresholds": self.eval_thresholds,
            "eval.tstar": self.eval_tstar,
        }
        values.update(dict(self.paths))
        return "\n".join(f"{k} = {values[k]}" for k in sorted(values))


def build_config(raw: dict) -> RunConfig:
    """Typed, validated RunConfig from a raw string map (missing keys default)."""
    typed = {}
    for key, (conv, default) in _SCHEMA.items():
        if key in raw:
            try:
                typed[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"key {key!r}: {exc}") from exc
        else:
            typed[key] = default
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")

    seed = typed["seed"]
    try:
        data = SyntheticSpec(
            num_classes=typed["data.num_classes"],
            feature_dim=typed["data.feature_dim"],
            frames_per_video=typed["data.frames_per_video"],
            videos_per_class=typed["data.videos_per_class"],
            segments_min=typed["data.segments_min"],
            segments_max=typed["data.segments_max"],
            segment_len_min=typed["data.segment_len_min"],
            segment_len_max=typed["data.segment_len_max"],
            flank_min=typed["data.flank_min"],
            flank_max=typed["data.flank_max"],
            separation=typed["data.separation"],
            context_offset=typed["data.context_offset"],
            noise=typed["data.noise"],
            seed=seed,
        )
        model = ModelConfig(
            attention_hidden=typed["model.attention_hidden"],
            cvae_hidden=typed["model.cvae_hidden"],
            latent_dim=typed["model.latent_dim"],
            prior_r=typed["model.prior_r"],
            obs_sigma=typed["model.obs_sigma"],
        )
        weights = LossWeights(
            alpha=typed["loss.alpha"],
            beta=typed["loss.beta"],
            gamma1=typed["loss.gamma1"],
            gamma2=typed["loss.gamma2"],
            mc_samples=typed["loss.mc_samples"],
            smooth_sigma=typed["loss.smooth_sigma"],
        )
        train = TrainConfig(
            epochs=typed["train.epochs"],
            batch_size=typed["train.batch_size"],
            learning_rate=typed["train.learning_rate"],
            alternation_period=typed["train.alternation_period"],
            warmup_epochs=typed["train.warmup_epochs"],
            frames_per_video=typed["train.frames_per_video"],
            seed=seed,
            weights=weights,
        )
        infer = InferenceConfig(
            attention_threshold=typed["infer.attention_threshold"],
            eta=typed["infer.eta"],
            nms_iou=typed["infer.nms_iou"],
            max_frames=typed["infer.max_frames"],
            class_prob_floor=typed["infer.class_prob_floor"],
        )
        if not 0.0 < typed["split.train_fraction"] < 1.0:
            raise ConfigurationError("split.train_fraction must lie in (0, 1)")
        if not 0.0 < typed["eval.tstar"] < 1.0:
            raise ConfigurationError("eval.tstar must lie in (0, 1)")
        parse_threshold_list(typed["eval.thresholds"])
    except (ConfigurationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    paths = tuple(
        (k, typed[k])
        for k in sorted(_SCHEMA)
        if k.startswith("paths.")
    )
    return RunConfig(
        seed=seed,
        data=data,
        model=model,
        train=train,
        infer=infer,
        split_fraction=typed["split.train_fraction"],
        split_seed=typed["split.seed"],
        eval_thresholds=typed["eval.thresholds"],
        eval_tstar=typed["eval.tstar"],
        paths=paths,
    )


def load_config(path=None, overrides=()) -> RunConfig:
    """RunConfig from an optional file plus 'key=value' override strings."""
    raw = {}
    if path is not None:
        from pathlib import Path

        raw = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value.strip()
    return build_config(raw)
