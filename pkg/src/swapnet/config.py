"""Experiment configuration: INI files in, canonical INI text out.

One file pins an entire run: dataset, network shape, per-group stochastic
rules, optimizer schedule, and evaluation settings. parse_config and
serialize_config round-trip exactly (floats are written with repr), and the
canonical serialization is what gets hashed into the run manifest, so two
configs are the same experiment if and only if their hashes match.

Rules live in a [rules] section applying to all three block groups; any
[rules.group1] / [rules.group2] / [rules.group3] section overrides fields
for that group alone. Schedules use the compact string forms
"constant:theta" and "linear:start:end" resolved over global block index.

The experiment seed is the training seed: it drives initialization,
shuffling, augmentation, and mask draws. The dataset seed and the inference
seed are separate fields so the same data and the same evaluation draws can
be reused across training seeds.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, replace

from .data import DatasetSpec
from .inference import InferenceMode
from .network import GroupRules, Network, NetworkConfig
from .rules import format_schedule, parse_schedule
from .train import TrainConfig

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "parse_config_file",
    "serialize_config",
    "config_hash",
    "build_network",
    "with_seed",
]

RULE_KEYS = ("kind", "granularity", "schedule_x", "schedule_fx")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    out_dir: str
    dataset: DatasetSpec
    network: NetworkConfig
    rules: tuple
    masks_per_example: bool
    train: TrainConfig
    inference: InferenceMode
    sweep_k_max: int
    sweep_repetitions: int

    def __post_init__(self):
        if len(self.rules) != 3:
            raise ValueError("need rules for exactly three block groups")
        # the dataset is the single source of truth for head size and input
        # channels, and the experiment seed is the training seed
        object.__setattr__(self, "network",
                           replace(self.network, num_classes=self.dataset.num_classes,
                                   in_channels=self.dataset.channels))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.sweep_k_max < 1 or self.sweep_repetitions < 1:
            raise ValueError("sweep settings must be >= 1")


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seed=int(seed))


def build_network(cfg: ExperimentConfig) -> Network:
    return Network(cfg.network, cfg.rules, masks_per_example=cfg.masks_per_example,
                   init_seed=cfg.seed)


def _format_lr_schedule(schedule) -> str:
    return ",".join(f"{e}:{r!r}" for e, r in schedule)


def _parse_lr_schedule(text: str):
    pairs = []
    for part in text.split(","):
        epoch, _, rate = part.strip().partition(":")
        pairs.append((int(epoch), float(rate)))
    return tuple(pairs)


def _rules_fields(gr: GroupRules) -> dict:
    return {"kind": gr.kind, "granularity": gr.granularity,
            "schedule_x": format_schedule(gr.schedule_x),
            "schedule_fx": format_schedule(gr.schedule_fx)}


def _group_rules_from(fields: dict) -> GroupRules:
    return GroupRules(kind=fields["kind"], granularity=fields["granularity"],
                      schedule_x=parse_schedule(fields["schedule_x"]),
                      schedule_fx=parse_schedule(fields["schedule_fx"]))


_SECTION_KEYS = {
    "experiment": {"name", "seed", "out"},
    "dataset": {"source", "path", "train_count", "eval_count", "num_classes",
                "image_hw", "channels", "noise", "seed"},
    "network": {"variant", "depth", "blocks_per_group", "width_multiplier"},
    "rules": set(RULE_KEYS) | {"per_example"},
    "train": {"batch_size", "momentum", "weight_decay", "epochs",
              "lr_schedule", "augment", "shuffle"},
    "inference": {"kind", "samples", "seed", "reduction"},
    "sweep": {"k_max", "repetitions"},
}


def _check_known_keys(cp: configparser.ConfigParser) -> None:
    # A misspelled key would otherwise silently fall back to its default,
    # which is the worst failure mode for experiment provenance.
    for section in cp.sections():
        if section in _SECTION_KEYS:
            allowed = _SECTION_KEYS[section]
        elif section in ("rules.group1", "rules.group2", "rules.group3"):
            allowed = set(RULE_KEYS)
        else:
            raise ValueError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in allowed:
                raise ValueError(f"unknown key {key!r} in [{section}] "
                                 f"(known: {', '.join(sorted(allowed))})")


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    _check_known_keys(cp)
    for section in ("experiment", "dataset", "network", "train", "inference", "sweep"):
        if not cp.has_section(section):
            cp.add_section(section)

    exp = cp["experiment"]
    name = exp.get("name", "experiment")
    seed = int(exp.get("seed", 0))
    out_dir = exp.get("out", f"runs/{name}")

    ds = cp["dataset"]
    dataset = DatasetSpec(
        source=ds.get("source", "synthetic"),
        path=ds.get("path") or None,
        train_count=int(ds.get("train_count", 2000)),
        eval_count=int(ds.get("eval_count", 512)),
        num_classes=int(ds.get("num_classes", 10)),
        image_hw=int(ds.get("image_hw", 32)),
        channels=int(ds.get("channels", 3)),
        noise=float(ds.get("noise", 1.0)),
        seed=int(ds.get("seed", 1234)),
    )

    nw = cp["network"]
    if "depth" in nw and "blocks_per_group" in nw:
        raise ValueError("[network] takes depth or blocks_per_group, not both")
    if "depth" in nw:
        n = (int(nw["depth"]) - 2) // 6
        if int(nw["depth"]) != 6 * n + 2 or n < 1:
            raise ValueError(f"depth must be 6k+2, got {nw['depth']}")
        bpg = (n, n, n)
    else:
        bpg = tuple(int(v) for v in nw.get("blocks_per_group", "3,3,3").split(","))
    network = NetworkConfig(
        variant=nw.get("variant", "v2"),
        blocks_per_group=bpg,
        width_multiplier=float(nw.get("width_multiplier", 1.0)),
        num_classes=dataset.num_classes,
        in_channels=dataset.channels,
    )

    base = {"kind": "none", "granularity": "unit",
            "schedule_x": "constant:1.0", "schedule_fx": "constant:1.0"}
    per_example = True
    if cp.has_section("rules"):
        sec = cp["rules"]
        per_example = sec.getboolean("per_example", True)
        for key in RULE_KEYS:
            if key in sec:
                base[key] = sec[key]
    groups = []
    for g in (1, 2, 3):
        fields = dict(base)
        section = f"rules.group{g}"
        if cp.has_section(section):
            sec = cp[section]
            for key in RULE_KEYS:
                if key in sec:
                    fields[key] = sec[key]
        groups.append(_group_rules_from(fields))

    tr = cp["train"]
    train = TrainConfig(
        batch_size=int(tr.get("batch_size", 128)),
        momentum=float(tr.get("momentum", 0.9)),
        weight_decay=float(tr.get("weight_decay", 1e-4)),
        epochs=int(tr.get("epochs", 20)),
        lr_schedule=_parse_lr_schedule(tr.get("lr_schedule", "0:0.1,15:0.01,18:0.001")),
        seed=seed,
        augment=tr.getboolean("augment", True),
        shuffle=tr.getboolean("shuffle", True),
    )

    inf = cp["inference"]
    inference = InferenceMode(
        kind=inf.get("kind", "stochastic"),
        samples=int(inf.get("samples", 30)),
        seed=int(inf.get("seed", 0)),
        reduction=inf.get("reduction", "mean-of-softmax"),
    )

    sw = cp["sweep"]
    sweep_k_max = int(sw.get("k_max", 30))
    sweep_repetitions = int(sw.get("repetitions", 5))

    return ExperimentConfig(name=name, seed=seed, out_dir=out_dir, dataset=dataset,
                            network=network, rules=tuple(groups),
                            masks_per_example=per_example, train=train,
                            inference=inference, sweep_k_max=sweep_k_max,
                            sweep_repetitions=sweep_repetitions)


def parse_config_file(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    cp["experiment"] = {"name": cfg.name, "seed": str(cfg.seed), "out": cfg.out_dir}
    ds = {"source": cfg.dataset.source}
    if cfg.dataset.path:
        ds["path"] = cfg.dataset.path
    ds.update({"train_count": str(cfg.dataset.train_count),
               "eval_count": str(cfg.dataset.eval_count),
               "num_classes": str(cfg.dataset.num_classes),
               "image_hw": str(cfg.dataset.image_hw),
               "channels": str(cfg.dataset.channels),
               "noise": repr(cfg.dataset.noise),
               "seed": str(cfg.dataset.seed)})
    cp["dataset"] = ds
    cp["network"] = {"variant": cfg.network.variant,
                     "blocks_per_group": ",".join(str(n) for n in cfg.network.blocks_per_group),
                     "width_multiplier": repr(cfg.network.width_multiplier)}
    uniform = cfg.rules[0] == cfg.rules[1] == cfg.rules[2]
    rules_base = {"per_example": str(cfg.masks_per_example).lower()}
    if uniform:
        rules_base.update(_rules_fields(cfg.rules[0]))
        cp["rules"] = rules_base
    else:
        cp["rules"] = rules_base
        for g in (1, 2, 3):
            cp[f"rules.group{g}"] = _rules_fields(cfg.rules[g - 1])
    cp["train"] = {"batch_size": str(cfg.train.batch_size),
                   "momentum": repr(cfg.train.momentum),
                   "weight_decay": repr(cfg.train.weight_decay),
                   "epochs": str(cfg.train.epochs),
                   "lr_schedule": _format_lr_schedule(cfg.train.lr_schedule),
                   "augment": str(cfg.train.augment).lower(),
                   "shuffle": str(cfg.train.shuffle).lower()}
    cp["inference"] = {"kind": cfg.inference.kind,
                       "samples": str(cfg.inference.samples),
                       "seed": str(cfg.inference.seed),
                       "reduction": cfg.inference.reduction}
    cp["sweep"] = {"k_max": str(cfg.sweep_k_max),
                   "repetitions": str(cfg.sweep_repetitions)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
