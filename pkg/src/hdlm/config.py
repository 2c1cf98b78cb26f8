"""Run configuration: one JSON document drives the training pipeline.

Layout (sections may be omitted where defaults exist):

    {
      "model":      {... ModelConfig fields; "vocab" may be omitted ...},
      "train":      {... TrainConfig fields ...},
      "generation": {... GenerationConfig fields ...},
      "data":       {"train": "path.jsonl", "eval": "path.jsonl"},
      "out_dir":    "runs/toy",
      "seed":       0,
      "checkpoint_every": 0
    }

The model vocabulary is usually left out and filled in from the tokenizer
built over the training corpus; spelling it out is allowed but it must then
match. Unknown keys anywhere are rejected so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .inference import GenerationConfig
from .model import ModelConfig
from .training import TrainConfig

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TOP_KEYS = {"model", "train", "generation", "data", "out_dir", "seed", "checkpoint_every"}


@dataclass
class RunConfig:
    model: dict
    train: TrainConfig
    generation: GenerationConfig
    train_data: str
    out_dir: str
    seed: int = 0
    eval_data: str | None = None
    checkpoint_every: int = 0    # 0 writes only the final checkpoint

    def model_config(self, vocab: int | None = None) -> ModelConfig:
        """Materialize the model section, resolving the vocabulary size."""
        kw = dict(self.model)
        if "vocab" not in kw:
            if vocab is None:
                raise ConfigError("model.vocab is unset and no tokenizer was supplied")
            kw["vocab"] = vocab
        elif vocab is not None and kw["vocab"] != vocab:
            raise ConfigError(
                f"model.vocab is {kw['vocab']} but the tokenizer carries {vocab} tokens"
            )
        return ModelConfig(**kw)


def _section(raw: dict, key: str, cls, path):
    body = raw.get(key, {})
    if not isinstance(body, dict):
        raise ConfigError(f"{path}: section {key!r} must be an object")
    try:
        return cls(**body)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad {key!r} section ({exc})") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")

    model = raw.get("model")
    if not isinstance(model, dict):
        raise ConfigError(f"{path}: a 'model' section is required")
    bad = set(model) - _MODEL_FIELDS
    if bad:
        raise ConfigError(f"{path}: unknown model keys {sorted(bad)}")

    data = raw.get("data", {})
    if not isinstance(data, dict) or set(data) - {"train", "eval"}:
        raise ConfigError(f"{path}: 'data' must hold only 'train' and 'eval' paths")
    train_data = data.get("train")
    if not isinstance(train_data, str) or not train_data:
        raise ConfigError(f"{path}: data.train must name the training JSONL")
    eval_data = data.get("eval")
    if eval_data is not None and not isinstance(eval_data, str):
        raise ConfigError(f"{path}: data.eval must be a path string")

    out_dir = raw.get("out_dir")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError(f"{path}: 'out_dir' is required")
    seed = raw.get("seed", 0)
    every = raw.get("checkpoint_every", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"{path}: seed must be an integer")
    if not isinstance(every, int) or isinstance(every, bool) or every < 0:
        raise ConfigError(f"{path}: checkpoint_every must be a non-negative integer")

    rc = RunConfig(
        model=model,
        train=_section(raw, "train", TrainConfig, path),
        generation=_section(raw, "generation", GenerationConfig, path),
        train_data=train_data,
        out_dir=out_dir,
        seed=seed,
        eval_data=eval_data,
        checkpoint_every=every,
    )
    # Surface malformed model values now rather than at first use; vocab is
    # the one field allowed to stay open until the tokenizer exists.
    rc.model_config(vocab=2 if "vocab" not in model else None)
    return rc
