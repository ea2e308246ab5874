"""Run configuration: one JSON document, strict schema, stable hash.

A config resolves as defaults <- file <- dedicated flags <- --override
entries, is validated field by field (unknown keys are rejected by dotted
name), and hashes to a sha256 over its canonical JSON. The output
directory is excluded from the hash: relocating artifacts is not a
different run.
"""

import hashlib
import json
import os
from dataclasses import dataclass

from .checkpoint import canonical_json
from .errors import ConfigInvalid
from .gridworld import TASK_KINDS

ECR_CHOICES = ("none", "teacher_exact", "teacher_noisy", "student")
HEAD_CHOICES = ("attention_pool", "nv_embed_pool", "qformer",
                "self_init_mhsa", "joint_mlp")
CHECKPOINT_CHOICES = ("embedder", "unified", "joint")
PROJECTION_CHOICES = ("pca", "tsne")


def default_config() -> dict:
    return {
        "seed": 0,
        "output_dir": "runs",
        "ecr_source": "none",
        "lam": 10.0,
        "eval_checkpoint": "embedder",
        "projection": "pca",
        "perplexity": 30.0,
        "suite": {
            "seed": 0,
            "k": 2,
            "pool_size": 64,
            "tasks": {
                "vqa": {"train": 400, "test": 100},
                "grounding": {"train": 400, "test": 100},
            },
        },
        "model": {
            "d_model": 32,
            "n_layers": 2,
            "n_heads": 4,
            "d_ff": 64,
            "max_seq_len": 160,
            "seed": 0,
        },
        "train": {
            "lr_backbone": 2e-4,
            "lr_head": 5e-4,
            "tau": 0.02,
            "lora_rank": 16,
            "lora_alpha": 64.0,
            "global_batch": 16,
            "n_sub": 2,
            "epochs": 1,
            "steps": 60,
            "max_new_tokens": 48,
        },
        "head": None,
    }


# sections whose value is a variable-shape mapping replaced wholesale on merge
_OPAQUE_KEYS = ("head",)


def _merge(base: dict, incoming: dict, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in incoming.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigInvalid(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and key not in _OPAQUE_KEYS:
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{dotted!r} must be an object")
            if key == "tasks":
                out[key] = dict(value)
            else:
                out[key] = _merge(base[key], value, prefix=dotted + ".")
        else:
            out[key] = value
    return out


def _parse_override(entry: str) -> tuple:
    if "=" not in entry:
        raise ConfigInvalid(f"override {entry!r} is not of the form key=value")
    path, raw = entry.split("=", 1)
    path = path.strip()
    if not path:
        raise ConfigInvalid(f"override {entry!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def _accepts_new_keys(parts) -> bool:
    """Mappings with caller-chosen keys: the head section and task counts."""
    joined = ".".join(parts)
    return (joined == "head" or joined == "suite.tasks"
            or joined.startswith("suite.tasks."))


def apply_override(data: dict, path: str, value) -> None:
    parts = path.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        dotted = ".".join(parts[: i + 1])
        if not isinstance(node, dict):
            raise ConfigInvalid(f"override path {path!r} descends into a scalar")
        if part not in node:
            if _accepts_new_keys(parts[: i + 1]):
                node[part] = {}
            else:
                raise ConfigInvalid(f"unknown config key {dotted!r}")
        elif node[part] is None and _accepts_new_keys(parts[: i + 1]):
            node[part] = {}
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict):
        raise ConfigInvalid(f"override path {path!r} descends into a scalar")
    if leaf not in node and not _accepts_new_keys(parts[:-1]):
        raise ConfigInvalid(f"unknown config key {path!r}")
    node[leaf] = value


def _expect(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigInvalid(f"{field}: {message}")


def _expect_int(value, field: str, minimum: int = 0) -> int:
    _expect(isinstance(value, int) and not isinstance(value, bool), field,
            f"must be an integer, got {value!r}")
    _expect(value >= minimum, field, f"must be >= {minimum}, got {value}")
    return value


def _expect_num(value, field: str, positive: bool = True) -> float:
    _expect(isinstance(value, (int, float)) and not isinstance(value, bool),
            field, f"must be a number, got {value!r}")
    if positive:
        _expect(value > 0, field, f"must be positive, got {value}")
    return float(value)


def _expect_choice(value, field: str, choices) -> str:
    _expect(value in choices, field,
            f"must be one of {list(choices)}, got {value!r}")
    return value


_HEAD_FIELDS = {
    "attention_pool": ("n_queries",),
    "nv_embed_pool": ("n_latent_value",),
    "qformer": ("n_layers", "last_n"),
    "self_init_mhsa": ("n_layers", "last_n"),
    "joint_mlp": (),
}


def _resolve_head(head, model: dict):
    """Fill per-kind defaults and reject stray fields; returns a full dict."""
    if head is None:
        return None
    _expect(isinstance(head, dict), "head", f"must be an object, got {head!r}")
    if "kind" not in head:
        raise ConfigInvalid("head.kind: required when a head is configured")
    kind = _expect_choice(head["kind"], "head.kind", HEAD_CHOICES)
    allowed = {"kind", "d"} | set(_HEAD_FIELDS[kind])
    for key in head:
        if key not in allowed:
            raise ConfigInvalid(f"unknown config key 'head.{key}' for {kind}")
    window = min(2, model["n_layers"])
    defaults = {"n_queries": 8, "n_latent_value": 2 * model["d_model"],
                "n_layers": window, "last_n": window}
    resolved = {"kind": kind, "d": head.get("d", model["d_model"])}
    for name in _HEAD_FIELDS[kind]:
        resolved[name] = head.get(name, defaults[name])
        _expect_int(resolved[name], f"head.{name}", minimum=1)
    _expect(resolved["d"] == model["d_model"], "head.d",
            f"must equal model.d_model ({model['d_model']}), got {resolved['d']}")
    if "last_n" in resolved:
        _expect(resolved["n_layers"] <= resolved["last_n"] <= model["n_layers"],
                "head.last_n",
                f"needs n_layers <= last_n <= model.n_layers, got "
                f"n_layers={resolved['n_layers']} last_n={resolved['last_n']}")
    return resolved


def validate_config(data: dict) -> dict:
    """Range-check every field and normalize derived ones. Returns data."""
    _expect_int(data["seed"], "seed")
    _expect(isinstance(data["output_dir"], str) and data["output_dir"],
            "output_dir", "must be a non-empty string")
    _expect_choice(data["ecr_source"], "ecr_source", ECR_CHOICES)
    # floats normalize in place so 10 and 10.0 hash identically
    data["lam"] = _expect_num(data["lam"], "lam")
    _expect_choice(data["eval_checkpoint"], "eval_checkpoint", CHECKPOINT_CHOICES)
    _expect_choice(data["projection"], "projection", PROJECTION_CHOICES)
    data["perplexity"] = _expect_num(data["perplexity"], "perplexity")

    suite = data["suite"]
    _expect_int(suite["seed"], "suite.seed")
    _expect_int(suite["k"], "suite.k", minimum=2)
    _expect(suite["k"] <= 4, "suite.k", f"grid side above 4 unsupported, got {suite['k']}")
    _expect_int(suite["pool_size"], "suite.pool_size", minimum=2)
    _expect(isinstance(suite["tasks"], dict) and suite["tasks"], "suite.tasks",
            "must be a non-empty object of task counts")
    for task, counts in suite["tasks"].items():
        _expect(task in TASK_KINDS, f"suite.tasks.{task}",
                f"unknown task kind; valid: {list(TASK_KINDS)}")
        _expect(isinstance(counts, dict), f"suite.tasks.{task}",
                "must be an object with train/test counts")
        for split in counts:
            _expect(split in ("train", "test"), f"suite.tasks.{task}.{split}",
                    "must be 'train' or 'test'")
            _expect_int(counts[split], f"suite.tasks.{task}.{split}")

    model = data["model"]
    for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
        _expect_int(model[name], f"model.{name}", minimum=1)
    _expect_int(model["seed"], "model.seed")
    _expect(model["d_model"] % model["n_heads"] == 0, "model.n_heads",
            f"must divide d_model={model['d_model']}, got {model['n_heads']}")

    train = data["train"]
    for name in ("lr_backbone", "lr_head", "tau", "lora_alpha"):
        train[name] = _expect_num(train[name], f"train.{name}")
    for name, minimum in (("lora_rank", 1), ("global_batch", 1), ("n_sub", 1),
                          ("epochs", 1), ("steps", 1), ("max_new_tokens", 4)):
        _expect_int(train[name], f"train.{name}", minimum=minimum)
    _expect(train["global_batch"] % train["n_sub"] == 0, "train.n_sub",
            f"must divide global_batch={train['global_batch']}, "
            f"got {train['n_sub']}")

    data["head"] = _resolve_head(data["head"], model)
    return data


def config_hash(data: dict) -> str:
    hashed = {k: v for k, v in data.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(hashed).encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    data: dict
    hash: str

    def __getitem__(self, key):
        return self.data[key]

    @property
    def run_dir_name(self) -> str:
        return self.hash[:16]

    def suite_kwargs(self) -> dict:
        s = self.data["suite"]
        return {"seed": s["seed"], "counts": s["tasks"], "k": s["k"],
                "pool_size": s["pool_size"]}

    def model_config(self, vocab_size: int):
        from .model import ModelConfig
        m = self.data["model"]
        return ModelConfig(vocab_size=vocab_size, d_model=m["d_model"],
                           n_layers=m["n_layers"], n_heads=m["n_heads"],
                           d_ff=m["d_ff"], max_seq_len=m["max_seq_len"],
                           seed=m["seed"])

    def head_config(self):
        if self.data["head"] is None:
            return None
        from .heads import HeadConfig
        h = dict(self.data["head"])
        return HeadConfig(kind=h.pop("kind"), d=h.pop("d"), **h)


def config_from_dict(document: dict, overrides=(), flags=None) -> RunConfig:
    """Resolve defaults <- document <- dedicated flags <- --override entries."""
    data = _merge(default_config(), document)
    for path, value in (flags or {}).items():
        apply_override(data, path, value)
    for entry in overrides:
        path, value = _parse_override(entry)
        apply_override(data, path, value)
    data = validate_config(data)
    return RunConfig(data=data, hash=config_hash(data))


def load_config(path=None, overrides=(), flags=None) -> RunConfig:
    """Parse + override + validate + hash. path None means defaults only."""
    document = {}
    if path is not None:
        if not os.path.exists(str(path)):
            raise ConfigInvalid(f"config file not found: {path}")
        try:
            with open(str(path)) as fh:
                document = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(document, dict):
            raise ConfigInvalid("config root must be a JSON object")
    return config_from_dict(document, overrides=overrides, flags=flags)
