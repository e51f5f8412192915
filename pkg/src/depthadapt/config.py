"""Run configuration: one JSON document drives a reproducible experiment.

The document is validated against RUN_CONFIG_SCHEMA (unknown keys are
rejected) before any work happens; a copy of the schema ships in docs/. All
randomness flows from the single top-level seed through named sub-seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .adapters import AdapterConfig
from .losses import LossWeights
from .networks import EncoderConfig
from .training import StageConfig

_STAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "eval_dataset"],
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr_schedule": {
            "type": "array", "minItems": 1,
            "items": {"type": "array", "prefixItems": [
                {"type": "integer", "minimum": 0}, {"type": "number", "exclusiveMinimum": 0}],
                "minItems": 2, "maxItems": 2},
        },
        "dataset": {"type": "string"},
        "eval_dataset": {"type": "string"},
        "init_from": {"type": "string"},
        "exclude_motion": {"type": "boolean"},
        "freeze_pose": {"type": "boolean"},
        "update_bn_stats": {"type": "boolean"},
        "plan": {"enum": ["stage", "full_finetune", "frozen"]},
        "grad_clip": {"type": "number", "minimum": 0},
        "eval_limit": {"type": "integer", "minimum": 1},
    },
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "depthadapt run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "output_dir"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "encoder": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "stage_channels": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                           "minItems": 4, "maxItems": 4},
                        "blocks_per_stage": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                             "minItems": 4, "maxItems": 4},
                        "large_kernel": {"type": "integer", "minimum": 3},
                    },
                },
                "adapter": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "down_projector": {"enum": ["conv3x3", "linear"]},
                        "up_projector": {"enum": ["conv3x3", "linear"]},
                        "attach_to": {"type": "array", "items": {"enum": ["replk_block", "convffn"]}},
                        "bn_design": {"enum": ["a", "b", "d"]},
                        "decoder_input_scales": {"type": "array",
                                                 "items": {"type": "integer", "minimum": 0, "maximum": 3},
                                                 "minItems": 1},
                    },
                },
                "bin_count": {"type": "integer", "minimum": 2},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ssim_alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "smoothness_lambda": {"type": "number", "minimum": 0},
                "consistency_weight": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "stage1": _STAGE_SCHEMA,
        "stage2": _STAGE_SCHEMA,
    },
}


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    encoder: EncoderConfig
    adapter: AdapterConfig
    loss: LossWeights
    bin_count: int
    stage1: StageConfig | None
    stage2: StageConfig | None


def sub_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _stage_from_dict(d: dict, stage: int, seed: int) -> StageConfig:
    kw = dict(d)
    schedule = kw.pop("lr_schedule", None)
    defaults = {1: [(0, 1e-4), (6, 1e-5)], 2: [(0, 1e-5)]}
    sched = [tuple(e) for e in schedule] if schedule else defaults[stage]
    epochs = kw.pop("epochs", 10 if stage == 1 else 5)
    return StageConfig(stage=stage, epochs=epochs, lr_schedule=sched,
                       seed=sub_seed(seed, f"stage{stage}"), **kw)


def load_config(path) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    return parse_config(doc)


def parse_config(doc: dict) -> RunConfig:
    jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    seed = doc["seed"]
    model = doc.get("model", {})
    enc_d = model.get("encoder", {})
    enc = EncoderConfig(
        stage_channels=tuple(enc_d.get("stage_channels", (16, 32, 64, 128))),
        blocks_per_stage=tuple(enc_d.get("blocks_per_stage", (1, 1, 1, 1))),
        large_kernel=enc_d.get("large_kernel", 7),
    )
    ad_d = dict(model.get("adapter", {}))
    if "attach_to" in ad_d:
        ad_d["attach_to"] = frozenset(ad_d["attach_to"])
    if "decoder_input_scales" in ad_d:
        ad_d["decoder_input_scales"] = tuple(ad_d["decoder_input_scales"])
    adapter = AdapterConfig(**ad_d)
    loss = LossWeights(**doc.get("loss", {}))
    stages = {}
    for num in (1, 2):
        key = f"stage{num}"
        stages[key] = _stage_from_dict(doc[key], num, seed) if key in doc else None
    return RunConfig(seed, doc["output_dir"], enc, adapter, loss,
                     model.get("bin_count", 16), stages["stage1"], stages["stage2"])
