"""Command-line entry point: gen-data, train, distill, quantize, sample,
eval, sweep, bench.

Every command reads a JSON config (unknown keys rejected), writes its
artifacts under --out, and drops a manifest.json recording the tool version,
seeds, the resolved config, and sha256 hashes of every input file. Exit
codes: 0 success, 2 usage error, 3 config error, 4 runtime contract
violation. SEEDLAB_LOG={quiet,info,debug} controls diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, distill, evalmetrics, flow, quant, trainer
from . import model as model_mod
from . import toydata as td
from .checkpoint import KIND_BASE, KIND_STUDENT, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ContractError
from .rng import Rng

log = logging.getLogger("seedlab")

SUBCOMMANDS = ("gen-data", "train", "distill", "quantize", "sample",
               "eval", "sweep", "bench")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CONTRACT = 4


def _setup_logging() -> None:
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SEEDLAB_LOG", "info"))
    if level is None:
        level = logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="seedlab %(levelname)s: %(message)s")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path, allowed_keys) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(allowed_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_manifest(out: Path, command: str, seed, config: dict,
                    inputs: dict, outputs: list) -> None:
    _write_json(out / "manifest.json", {
        "tool": "seedlab",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "input_hashes": {Path(k).name: _sha256(k) for k in inputs},
        "outputs": sorted(outputs),
    })


def _load_net(path):
    ckpt = load_checkpoint(path)
    return model_mod.net_from_params(ckpt.params), ckpt.header


def _sampler_from_dict(d: dict) -> flow.SamplerConfig:
    allowed = {"steps", "w_i", "w_t", "mode", "noise_source"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
    try:
        return flow.SamplerConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _load_noise_ref(path) -> distill.NoiseRefNet:
    ckpt = load_checkpoint(path)
    dim = ckpt.params["nr.1.w"].shape[1]
    hidden = ckpt.params["nr.0.w"].shape[1]
    return distill.NoiseRefNet(dim=dim, hidden=hidden, params=ckpt.params)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> list:
    cfg = _load_config(args.config, {"dims", "sources", "op_kinds", "recaption",
                                     "filter", "augment_reverse", "resample"})
    dims = cfg.get("dims", [8])
    sources = cfg.get("sources")
    if not sources:
        raise ConfigError("gen-data config needs a 'sources' map of kind -> count")
    rng = Rng(args.seed)
    pairs: list = []
    for kind in sorted(sources):
        pairs.extend(td.gen_pairs(kind, int(sources[kind]), dims, rng,
                                  op_kinds=cfg.get("op_kinds")))

    recaption_mode = cfg.get("recaption", "video")
    if recaption_mode not in ("video", "all", "none"):
        raise ConfigError("recaption must be one of: video, all, none")
    if recaption_mode == "all":
        pairs = td.recaption_dataset(pairs)
    elif recaption_mode == "video":
        pairs = [td.EditPair(p.source, p.target, td.recaption(p), p.meta,
                             quality=p.quality, weight=p.weight)
                 if p.meta.source_kind == "video_frames" else p
                 for p in pairs]

    if "filter" in cfg:
        f = cfg["filter"]
        unknown = set(f) - {"theta_sim", "theta_change"}
        if unknown:
            raise ConfigError(f"unknown filter keys: {sorted(unknown)}")
        kept = []
        dropped = {"similarity": 0, "displacement": 0}
        for p in pairs:
            keep, reason = td.filter_pair(p, f.get("theta_sim", td.THETA_SIM),
                                          f.get("theta_change", td.THETA_CHANGE))
            if keep:
                kept.append(p)
            else:
                dropped[reason] += 1
        log.info("filter dropped %s", dropped)
        pairs = kept

    if cfg.get("augment_reverse", False):
        pairs = td.augment_reverse(pairs)
    if "resample" in cfg:
        r = cfg["resample"]
        unknown = set(r) - {"weights", "n"}
        if unknown:
            raise ConfigError(f"unknown resample keys: {sorted(unknown)}")
        pairs = td.importance_resample(pairs, dict(r["weights"]), rng,
                                       n=r.get("n"))

    out = args.out / "dataset.jsonl"
    td.write_dataset(pairs, out, seed=args.seed)
    log.info("wrote %d pairs to %s", len(pairs), out)
    return ["dataset.jsonl", "dataset.jsonl.manifest.json"]


def cmd_train(args) -> list:
    cfg = _load_config(args.config, {"dim", "dataset", "stages", "init_seed",
                                     "width", "t_reward"})
    if "dataset" not in cfg or "stages" not in cfg:
        raise ConfigError("train config needs 'dataset' and 'stages'")
    args.inputs.append(cfg["dataset"])
    dataset = td.read_dataset(cfg["dataset"])
    dim = int(cfg.get("dim", 8))
    init_seed = int(cfg.get("init_seed", args.seed))
    net = model_mod.init_net(dim, Rng(init_seed), width=int(cfg.get("width", 256)))
    stages = []
    for i, sd in enumerate(cfg["stages"]):
        sd = dict(sd)
        sd.setdefault("seed", args.seed * 1000 + i)
        stages.append(trainer.stage_config_from_dict(sd))
    nets, metrics, _dist = trainer.run_stages(
        net, dataset, stages, t_reward=float(cfg.get("t_reward", flow.T_REWARD_DEFAULT)))
    net = nets if isinstance(nets, model_mod.VelocityNet) else nets[dim]

    save_checkpoint(net.params, args.out / "checkpoint.bin", kind=KIND_BASE)
    _write_json(args.out / "model_card.json", model_mod.model_card(net))
    with open(args.out / "metrics.jsonl", "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return ["checkpoint.bin", "model_card.json", "metrics.jsonl"]


def cmd_distill(args) -> list:
    cfg = _load_config(args.config, {"dataset", "teacher", "distill", "noise_ref"})
    teacher_path = cfg.get("teacher") or args.checkpoint
    if not teacher_path or "dataset" not in cfg:
        raise ConfigError("distill config needs 'dataset' and a teacher checkpoint")
    args.inputs += [cfg["dataset"], teacher_path]
    dataset = td.read_dataset(cfg["dataset"])
    teacher, header = _load_net(teacher_path)
    if header.kind != KIND_BASE:
        raise ConfigError("distillation teacher must be a base checkpoint")

    dc = dict(cfg.get("distill", {}))
    dc.setdefault("seed", args.seed)
    for k in ("w_i_range", "w_t_range"):
        if k in dc:
            dc[k] = tuple(dc[k])
    try:
        dcfg = distill.DistillConfig(**dc)
    except TypeError as e:
        raise ConfigError(str(e)) from e

    nr_cfg = dict(cfg.get("noise_ref", {}))
    unknown = set(nr_cfg) - {"candidates", "epochs", "subset"}
    if unknown:
        raise ConfigError(f"unknown noise_ref keys: {sorted(unknown)}")
    subset = dataset[: int(nr_cfg.get("subset", 256))]
    noise_ref, nr_history = distill.train_noise_ref(
        teacher, subset, Rng(args.seed + 1),
        candidates=int(nr_cfg.get("candidates", 8)),
        epochs=int(nr_cfg.get("epochs", 60)))

    student = model_mod.student_from_teacher(teacher, Rng(args.seed + 2))
    student, cfg_hist = distill.distill_cfg(teacher, student, dataset, dcfg)
    student, few_hist = distill.distill_fewstep(teacher, student, noise_ref,
                                                dataset, dcfg)

    w_ranges = (*dcfg.w_i_range, *dcfg.w_t_range)
    save_checkpoint(student.params, args.out / "student.bin",
                    kind=KIND_STUDENT, w_ranges=w_ranges)
    save_checkpoint(noise_ref.params, args.out / "noise_ref.bin")
    _write_json(args.out / "distill_report.json", {
        "noise_ref_mse": nr_history, "cfg_history": cfg_hist,
        "fewstep_history": few_hist, "student_steps": dcfg.student_steps,
        "w_i_range": list(dcfg.w_i_range), "w_t_range": list(dcfg.w_t_range),
    })
    return ["student.bin", "noise_ref.bin", "distill_report.json"]


def cmd_quantize(args) -> list:
    cfg = _load_config(args.config, {"dataset", "checkpoint", "bits", "calib_n",
                                     "finetune_iters"})
    ckpt_path = cfg.get("checkpoint") or args.checkpoint
    if not ckpt_path or "dataset" not in cfg:
        raise ConfigError("quantize config needs 'dataset' and a checkpoint")
    args.inputs += [cfg["dataset"], ckpt_path]
    dataset = td.read_dataset(cfg["dataset"])
    net, _ = _load_net(ckpt_path)
    calib = quant.collect_calibration(net, dataset, Rng(args.seed),
                                      n=int(cfg.get("calib_n", 256)))
    schemes, report = quant.quantize_net(net, calib, bits=int(cfg.get("bits", 8)),
                                         finetune_iters=int(cfg.get("finetune_iters", 100)))
    _write_json(args.out / "schemes.json", quant.schemes_to_json(schemes))
    _write_json(args.out / "quant_report.json", report)
    return ["schemes.json", "quant_report.json"]


def _prepare_eval_inputs(args, cfg):
    ckpt_path = cfg.get("checkpoint") or args.checkpoint
    if not ckpt_path or "dataset" not in cfg:
        raise ConfigError("command config needs 'dataset' and a checkpoint")
    args.inputs += [cfg["dataset"], ckpt_path]
    dataset = td.read_dataset(cfg["dataset"])
    n = cfg.get("n")
    if n is not None:
        dataset = dataset[: int(n)]
    net, header = _load_net(ckpt_path)
    noise_ref = None
    if cfg.get("noise_ref"):
        args.inputs.append(cfg["noise_ref"])
        noise_ref = _load_noise_ref(cfg["noise_ref"])
    return dataset, net, header, noise_ref


def cmd_sample(args) -> list:
    cfg = _load_config(args.config, {"dataset", "checkpoint", "sampler",
                                     "noise_ref", "n"})
    dataset, net, _header, noise_ref = _prepare_eval_inputs(args, cfg)
    scfg = _sampler_from_dict(cfg.get("sampler", {"steps": 75}))
    x0 = np.stack([p.source.values for p in dataset])
    out, evals = flow.sample(net, x0, [p.meta for p in dataset],
                             [p.instruction for p in dataset], scfg,
                             Rng(args.seed), noise_ref=noise_ref)
    with open(args.out / "samples.jsonl", "w", encoding="utf-8") as f:
        for i, row in enumerate(out):
            f.write(json.dumps({"pair": i, "evals": evals,
                                "output": [format(v, ".17g") for v in row]}) + "\n")
    return ["samples.jsonl"]


def cmd_eval(args) -> list:
    cfg = _load_config(args.config, {"dataset", "checkpoint", "sampler",
                                     "noise_ref", "n", "schemes"})
    dataset, net, _header, noise_ref = _prepare_eval_inputs(args, cfg)
    if cfg.get("schemes"):
        args.inputs.append(cfg["schemes"])
        with open(cfg["schemes"], "r", encoding="utf-8") as f:
            net = quant.QuantizedNet(net, quant.schemes_from_json(json.load(f)))
    scfg = _sampler_from_dict(cfg.get("sampler", {"steps": 75}))
    x0 = np.stack([p.source.values for p in dataset])
    out, evals = flow.sample(net, x0, [p.meta for p in dataset],
                             [p.instruction for p in dataset], scfg,
                             Rng(args.seed), noise_ref=noise_ref)
    records = evalmetrics.evaluate_outputs(dataset, out)
    with open(args.out / "eval_records.csv", "w", encoding="utf-8") as f:
        f.write("pair_id,consistency,direction,oracle_error,"
                "instruction_response,image_consistency,quality,degenerate\n")
        for r in records:
            f.write(",".join([str(r.pair_id)] +
                             [format(v, ".6g") for v in
                              (r.consistency, r.direction, r.oracle_error) + r.scores] +
                             ["|".join(sorted(r.degenerate))]) + "\n")
    summary = evalmetrics.rates(records)
    summary["mean_oracle_error"] = float(np.mean([r.oracle_error for r in records]))
    summary["evals_per_record"] = evals
    _write_json(args.out / "eval_summary.json", summary)
    return ["eval_records.csv", "eval_summary.json"]


def cmd_sweep(args) -> list:
    cfg = _load_config(args.config, {"dataset", "checkpoint", "w_i_grid",
                                     "w_t_grid", "steps", "n", "noise_ref"})
    dataset, net, _header, noise_ref = _prepare_eval_inputs(args, cfg)
    csv_text = evalmetrics.sweep_cfg(
        net, dataset, cfg.get("w_i_grid", [1.0]), cfg.get("w_t_grid", [1.0]),
        Rng(args.seed), steps=int(cfg.get("steps", 75)), noise_ref=noise_ref)
    with open(args.out / "sweep.csv", "w", encoding="utf-8") as f:
        f.write(csv_text)
    return ["sweep.csv"]


def cmd_bench(args) -> list:
    cfg = _load_config(args.config, {"dataset", "teacher", "student", "schemes",
                                     "noise_ref", "n", "teacher_steps",
                                     "student_steps", "w_i", "w_t"})
    for k in ("dataset", "teacher", "student", "schemes", "noise_ref"):
        if k not in cfg:
            raise ConfigError(f"bench config needs '{k}'")
        args.inputs.append(cfg[k])
    dataset = td.read_dataset(cfg["dataset"])[: int(cfg.get("n", 32))]
    teacher, _ = _load_net(cfg["teacher"])
    student, _ = _load_net(cfg["student"])
    noise_ref = _load_noise_ref(cfg["noise_ref"])
    with open(cfg["schemes"], "r", encoding="utf-8") as f:
        schemes = quant.schemes_from_json(json.load(f))

    x0 = np.stack([p.source.values for p in dataset])
    metas = [p.meta for p in dataset]
    instrs = [p.instruction for p in dataset]
    x1_true = np.stack([td.apply_instruction(p.source.values, p.instruction)
                        for p in dataset])
    w_i, w_t = float(cfg.get("w_i", 1.5)), float(cfg.get("w_t", 2.0))

    t_steps = int(cfg.get("teacher_steps", 75))
    t_cfg = flow.SamplerConfig(steps=t_steps, w_i=w_i, w_t=w_t, mode="teacher_cfg")
    import time as _time
    t0 = _time.perf_counter()
    t_out, t_evals = flow.sample(teacher, x0, metas, instrs, t_cfg, Rng(args.seed))
    t_wall = (_time.perf_counter() - t0) * 1e3
    t_macs = sum(quant.trunk_macs(teacher).values())

    s_steps = int(cfg.get("student_steps", 8))
    qnet = quant.QuantizedNet(student, schemes)
    s_cfg = flow.SamplerConfig(steps=s_steps, w_i=w_i, w_t=w_t,
                               mode="student_distilled",
                               noise_source="unified_reference")
    s_out, s_evals = flow.sample(qnet, x0, metas, instrs, s_cfg, Rng(args.seed),
                                 noise_ref=noise_ref)
    s_report = qnet.cost_report()

    n = len(dataset)
    teacher_cost = {"float_macs": t_macs * t_evals * n,
                    "weighted_macs": float(t_macs * t_evals * n),
                    "eval_counts": t_evals, "record_forwards": t_evals * n,
                    "wall_clock_ms": t_wall}
    err_t = float(np.mean(np.linalg.norm(t_out - x1_true, axis=1) / np.sqrt(x0.shape[1])))
    err_s = float(np.mean(np.linalg.norm(s_out - x1_true, axis=1) / np.sqrt(x0.shape[1])))
    _write_json(args.out / "cost_report.json", {
        "teacher": teacher_cost,
        "student": s_report,
        "weighted_mac_reduction": teacher_cost["weighted_macs"] / s_report["weighted_macs"],
        "eval_reduction": t_evals / s_evals,
        "teacher_endpoint_error": err_t,
        "student_endpoint_error": err_s,
    })
    return ["cost_report.json"]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "quantize": cmd_quantize,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seedlab",
        description="Desk-scale instruction-editing flow lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--checkpoint", default=None, help="model checkpoint path")
    return parser


def cli(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    args.out = Path(args.out)
    args.out.mkdir(parents=True, exist_ok=True)
    args.inputs = [args.config]
    try:
        outputs = _HANDLERS[args.command](args)
        with open(args.config, "r", encoding="utf-8") as f:
            resolved = json.load(f)
        _write_manifest(args.out, args.command, args.seed, resolved,
                        args.inputs, outputs + ["manifest.json"])
    except ConfigError as e:
        log.error("config contract violated: %s", e)
        return EXIT_CONFIG
    except (ContractError, CheckpointError) as e:
        log.error("runtime contract violated: %s", e)
        return EXIT_CONTRACT
    return EXIT_OK


def main() -> None:  # pragma: no cover
    sys.exit(cli())


if __name__ == "__main__":  # pragma: no cover
    main()
