"""Command-line entry point: ``ndtplace <subcommand> [flags]``.

Every run-config key is also a flag (``route_len`` -> ``--route-len``); flags
override the ``--config`` file. Exit codes: 0 success, 1 usage error, 2 data
error. Logs go to stderr; tables go to stdout unless a file is named.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as runcfg
from .condenser import condense, condense_many
from .io import (
    FormatError,
    read_cloud,
    read_descriptors,
    read_manifest,
    read_ndt,
    read_weights,
    write_cloud,
    write_descriptors,
    write_loss_curve,
    write_manifest,
    write_ndt,
    write_poses,
    write_weights,
)
from .metric import TrainingDataError, TrainingDiverged, train
from .model import CardinalityError, PlaceNet, embed
from .ndt import NdtError
from .places import SynthConfig, synth_dataset
from .retrieval import DescriptorIndex, RetrievalError, evaluate, write_report

log = logging.getLogger("ndtplace")

USAGE_ERROR = 1
DATA_ERROR = 2
DATA_ERRORS = (
    NdtError,
    FormatError,
    RetrievalError,
    CardinalityError,
    TrainingDataError,
    TrainingDiverged,
    OSError,
    KeyError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def map_path(maps_dir: Path, record_id: int) -> Path:
    return Path(maps_dir) / f"{record_id:06d}.ndt"


def _need(cfg: runcfg.RunConfig, key: str) -> str:
    if key not in cfg.paths:
        raise UsageError(f"missing --{key.replace('_', '-')} (or '{key} = ...' in the config file)")
    return cfg.paths[key]


def _manifest_root(manifest: Path) -> Path:
    return Path(manifest).resolve().parent


def _select(records, split: str):
    if split == "all":
        return list(records)
    return [r for r in records if r.split == split]


def _load_maps(cfg, records):
    maps_dir = Path(_need(cfg, "maps"))
    return {r.id: read_ndt(map_path(maps_dir, r.id)) for r in records}


def _model_from_checkpoint(cfg: runcfg.RunConfig) -> PlaceNet:
    ckpt = Path(_need(cfg, "checkpoint"))
    model = PlaceNet(cfg.model_config, seed=cfg.seed, dtype=np.dtype(cfg.schedule.dtype))
    model.load_state_dict(read_weights(ckpt))
    return model.eval()


def _config_for(args, extra_defaults: dict | None = None) -> runcfg.RunConfig:
    overrides = {k: str(v) for k, v in vars(args).items() if k in _KEYS and v is not None}
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        sidecar = Path(args.checkpoint + ".cfg")
        path = sidecar if sidecar.exists() else None
    pairs = dict(extra_defaults or {})
    if path is not None:
        pairs.update(runcfg.parse_pairs(Path(path).read_text(), str(path)))
    pairs.update(overrides)
    try:
        return runcfg.build(pairs)
    except runcfg.ConfigError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args, cfg):
    out = Path(args.out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(config=SynthConfig(seed=cfg.seed, n_runs=cfg.runs, route_len=cfg.route_len, noise=cfg.noise))
    records = []
    for run in ds.runs:
        write_poses(out / f"poses_run{run.run}.csv", run.poses)
        for rec, cloud in zip(run.records, run.clouds):
            rec.cloud_path = f"clouds/{rec.id:06d}.pcd"
            write_cloud(out / rec.cloud_path, cloud)
            records.append(rec)
    write_manifest(out / "manifest.csv", records)
    log.info("wrote %d places from %d runs to %s", len(records), len(ds.runs), out)
    return 0


def cmd_condense(args, cfg):
    src, dst = Path(args.input), Path(args.out)
    if src.suffix != ".csv":
        ndt = condense(read_cloud(src), cfg.condenser, workers=cfg.workers)
        write_ndt(dst, ndt)
        log.info("%s: %d cells, voxel %.3f m", src, len(ndt), ndt.meta["voxel_size"])
        return 0
    records = read_manifest(src)
    root = _manifest_root(src)
    clouds = [read_cloud(root / r.cloud_path) for r in records]
    t0 = time.perf_counter()
    maps = condense_many(clouds, cfg.condenser, workers=cfg.workers)
    dst.mkdir(parents=True, exist_ok=True)
    for rec, ndt in zip(records, maps):
        write_ndt(map_path(dst, rec.id), ndt)
    log.info("condensed %d submaps in %.2f s", len(maps), time.perf_counter() - t0)
    return 0


def cmd_train(args, cfg):
    records = read_manifest(_need(cfg, "data"))
    maps = _load_maps(cfg, _select(records, "train"))
    result = train(maps, records, cfg.model_config, cfg.schedule, seed=cfg.seed)
    ckpt = Path(_need(cfg, "checkpoint"))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    write_weights(ckpt, result.model.state_dict())
    Path(str(ckpt) + ".cfg").write_text(cfg.to_text())
    loss_csv = cfg.paths.get("loss_csv")
    if loss_csv:
        write_loss_curve(loss_csv, result.curve)
    else:
        for epoch, loss, lr in result.curve:
            print(f"{epoch},{loss!r},{lr!r}")
    log.info("trained %d epochs in %.1f s", len(result.curve), result.seconds)
    return 0


def cmd_embed(args, cfg):
    records = _select(read_manifest(_need(cfg, "data")), args.split)
    if not records:
        raise RetrievalError(f"no records in split {args.split!r}")
    model = _model_from_checkpoint(cfg)
    maps = _load_maps(cfg, records)
    desc = embed(model, [maps[r.id] for r in records], workers=cfg.workers)
    write_descriptors(args.out, [r.id for r in records], [[r.x, r.y] for r in records], desc)
    log.info("embedded %d submaps into %s", len(records), args.out)
    return 0


def _read_tables(paths):
    tables = [read_descriptors(p) for p in paths]
    dims = {t.descriptors.shape[1] for t in tables if len(t)}
    if len(dims) > 1:
        raise RetrievalError(f"descriptor dimensions differ: {sorted(dims)}")
    ids = np.concatenate([t.ids for t in tables])
    pos = np.concatenate([t.positions for t in tables])
    desc = np.concatenate([t.descriptors for t in tables])
    return ids, pos, desc


def cmd_index(args, cfg):
    ids, pos, desc = _read_tables(args.inputs)
    t0 = time.perf_counter()
    index = DescriptorIndex(ids, desc, pos)
    log.info("indexed %d descriptors (%s) in %.3f s", len(index), index.method, time.perf_counter() - t0)
    write_descriptors(args.out, ids, pos, desc)
    return 0


def cmd_query(args, cfg):
    db_ids, db_pos, db_desc = _read_tables([_need(cfg, "database")])
    index = DescriptorIndex(db_ids, db_desc, db_pos)
    q = read_descriptors(_need(cfg, "queries"))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("query_id,rank,id,distance\n")
        for qid, d in zip(q.ids, q.descriptors):
            for rank, (rid, dist) in enumerate(index.query(d, cfg.top_n, exclude_id=int(qid)), 1):
                out.write(f"{qid},{rank},{rid},{dist!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    log.info("answered %d queries, mean %.3g ms", len(q), 1e3 * float(np.mean(index.query_times or [0.0])))
    return 0


def cmd_eval(args, cfg):
    db_ids, db_pos, db_desc = _read_tables([_need(cfg, "database")])
    index = DescriptorIndex(db_ids, db_desc, db_pos)
    q = read_descriptors(_need(cfg, "queries"))
    report = evaluate(q.ids, q.positions, q.descriptors, index, max_n=cfg.top_n)
    path = cfg.paths.get("report")
    if path:
        write_report(path, report)
    else:
        print("N,recall")
        for n, r in report.rows():
            print(f"{n},{r:.4f}")
        print(f"1%,{report.recall_at_1pct:.4f}")
    log.info(
        "recall@1 %.2f%%, recall@1%% (N=%d) %.2f%% over %d queries (%d without a true match skipped)",
        report.recall_at_1,
        report.one_percent_n,
        report.recall_at_1pct,
        report.n_queries,
        report.n_skipped,
    )
    return 0


def cmd_bench(args, cfg):
    records = read_manifest(_need(cfg, "data"))[: args.limit]
    root = _manifest_root(_need(cfg, "data"))
    clouds = [read_cloud(root / r.cloud_path) for r in records]
    t0 = time.perf_counter()
    maps = condense_many(clouds, cfg.condenser, workers=cfg.workers)
    t_condense = time.perf_counter() - t0
    if "checkpoint" in cfg.paths:
        model = _model_from_checkpoint(cfg)
    else:
        model = PlaceNet(cfg.model_config, seed=cfg.seed, dtype=np.dtype(cfg.schedule.dtype)).eval()
    t0 = time.perf_counter()
    desc = embed(model, maps, workers=cfg.workers)
    t_embed = time.perf_counter() - t0
    index = DescriptorIndex([r.id for r in records], desc)
    for rec, d in zip(records, desc):
        index.query(d, cfg.top_n, exclude_id=rec.id)
    n = len(records)
    print("stage,total_s,per_submap_s")
    print(f"condense,{t_condense:.4f},{t_condense / n:.5f}")
    print(f"embed,{t_embed:.4f},{t_embed / n:.5f}")
    print(f"query,{sum(index.query_times):.4f},{float(np.mean(index.query_times)):.6f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "condense": cmd_condense,
    "train": cmd_train,
    "embed": cmd_embed,
    "index": cmd_index,
    "query": cmd_query,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

_KEYS = set(runcfg.known_keys())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--log-level", default="INFO")
    keys = common.add_argument_group("run configuration keys")
    for key in runcfg.known_keys():
        keys.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V")

    parser = _Parser(prog="ndtplace", description="NDT-cell place recognition pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    p = sub.add_parser("synth", parents=[common], help="generate the synthetic multi-run survey")
    p.add_argument("--out", required=True)
    p = sub.add_parser("condense", parents=[common], help="point cloud (or manifest) -> NDT map(s)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    sub.add_parser("train", parents=[common], help="train a descriptor network")
    p = sub.add_parser("embed", parents=[common], help="compute descriptors for a manifest")
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--out", required=True)
    p = sub.add_parser("index", parents=[common], help="merge descriptor files into a database")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("query", parents=[common], help="top-N neighbours of query descriptors")
    p.add_argument("--out")
    sub.add_parser("eval", parents=[common], help="Recall@N of queries against a database")
    p = sub.add_parser("bench", parents=[common], help="per-stage wall time")
    p.add_argument("--limit", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr, level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s", force=True
    )
    try:
        cfg = _config_for(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"ndtplace {args.command}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ndtplace {args.command}: {msg}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
