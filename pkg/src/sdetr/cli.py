"""Experiment driver: train / eval / sweep / report.

Runs are configured by a flat ``key = value`` text file (# comments allowed,
unknown keys are hard errors) plus a few overriding flags. Every command is
deterministic given (config, seed) in single-threaded mode. Exit codes:
0 success, 1 contract error, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import threadpoolctl

from . import tensor as T
from .data import Scene, SceneConfig, generate_scene, import_dataset
from .matching import DetectionSet
from .metrics import (attention_flop_count, average_precision, corr_metric,
                      dam_nonzero_ratio, layerwise_grad_norm)
from .model import ModelConfig, SparseDetector, total_loss
from .saliency import build_dam, dump_dam, dump_selection_mask
from .tensor import ContractError, FormatError, Tensor

EVAL_INDEX_OFFSET = 1_000_000


def single_threaded_blas() -> None:
    """Pin BLAS to one thread: faster on these small matrices and removes the
    only source of run-to-run nondeterminism."""
    threadpoolctl.threadpool_limits(limits=1)

TRAIN_LOG_COLUMNS = [
    "epoch", "loss_total", "loss_final_cls", "loss_final_l1", "loss_final_giou",
    "loss_dec_aux", "loss_enc_aux", "loss_topk", "loss_os", "loss_dam",
    "ap", "ap50", "corr", "dam_nonzero",
]
EVAL_COLUMNS = [
    "rho_infer", "ap", "ap50", "corr", "dam_nonzero",
    "encoder_pairs", "decoder_self_pairs", "decoder_cross_pairs", "total_pairs",
]
SWEEP_AP_COLUMNS = ["criterion", "rho", "seed", "ap", "ap50", "corr", "dam_nonzero"]
SWEEP_CORR_COLUMNS = ["criterion", "rho", "seed", "epoch", "corr"]
GRADNORM_COLUMNS = ["layer", "grad_norm"]
FLOPS_COLUMNS = [
    "n_tokens", "s_tokens", "dense_pairs_per_layer", "deform_pairs_per_layer",
    "sparse_pairs_per_layer", "encoder_pairs", "decoder_self_pairs",
    "decoder_cross_pairs", "total_pairs",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    scene: SceneConfig
    train_scenes: int = 2000
    eval_scenes: int = 500
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_epoch: int = 16
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    clip_norm: float = 0.5
    seed: int = 0
    data_seed: int = 0
    eval_subset: int = 128  # scenes per intermediate-epoch eval; 0 = full set; final epoch always full


_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_SCENE_FIELDS = {f.name: f.type for f in dataclasses.fields(SceneConfig)
                 if f.name not in ("seed", "num_classes")}
_RUN_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)
               if f.name not in ("model", "scene")}


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"config key {key!r}: expected a boolean, got {raw!r}")
    return raw


def parse_config(path: str) -> RunConfig:
    """Parse a flat key = value config; unknown keys are hard errors."""
    model_kw: dict = {}
    scene_kw: dict = {}
    run_kw: dict = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in _MODEL_FIELDS:
            model_kw[key] = _convert(key, raw, _MODEL_FIELDS[key])
        elif key in _SCENE_FIELDS:
            scene_kw[key] = _convert(key, raw, _SCENE_FIELDS[key])
        elif key in _RUN_FIELDS:
            run_kw[key] = _convert(key, raw, _RUN_FIELDS[key])
        else:
            raise ContractError(f"{path}:{lineno}: unknown config key {key!r}")
    scene_kw["num_classes"] = model_kw.get("num_classes", 3)
    scene_kw["seed"] = run_kw.get("data_seed", 0)
    return RunConfig(model=ModelConfig(**model_kw), scene=SceneConfig(**scene_kw), **run_kw)


def config_text(run: RunConfig) -> str:
    """Render a RunConfig back to the flat key = value form."""
    lines = []
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(run.model, f.name)}")
    for name in _SCENE_FIELDS:
        lines.append(f"{name} = {getattr(run.scene, name)}")
    for name in _RUN_FIELDS:
        lines.append(f"{name} = {getattr(run, name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Global-norm gradient clipping; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def batched(indices: np.ndarray, size: int):
    for i in range(0, len(indices), size):
        yield indices[i:i + size]


def scenes_to_batch(scenes: list[Scene], idxs, dtype=np.float32):
    images = Tensor(np.stack([scenes[i].image for i in idxs]).astype(dtype))
    targets = [(scenes[i].labels, scenes[i].boxes.astype(np.float64)) for i in idxs]
    return images, targets


def load_training_data(run: RunConfig, dataset: str | None, synthetic: str | None):
    if dataset and synthetic:
        raise ContractError("pass either --dataset or --synthetic, not both")
    if dataset:
        return import_dataset(dataset)
    if synthetic:
        try:
            seed_s, n_s = synthetic.split(":")
            seed, n = int(seed_s), int(n_s)
        except ValueError:
            raise ContractError(f"--synthetic expects '<seed>:<n>', got {synthetic!r}") from None
        cfg = dataclasses.replace(run.scene, seed=seed)
        return [generate_scene(cfg, i) for i in range(n)]
    return [generate_scene(run.scene, i) for i in range(run.train_scenes)]


def eval_scenes_for(run: RunConfig) -> list[Scene]:
    return [generate_scene(run.scene, EVAL_INDEX_OFFSET + i) for i in range(run.eval_scenes)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: SparseDetector, scenes: list[Scene], rho: float,
                   batch_size: int, scene_ids: np.ndarray | None = None) -> dict:
    """AP plus mean overlap statistics at an inference keeping ratio."""
    if scene_ids is None:
        scene_ids = np.arange(len(scenes)) + EVAL_INDEX_OFFSET
    preds: list[DetectionSet] = []
    gts = []
    corrs: list[float] = []
    nonzeros: list[float] = []
    with T.no_grad():
        for chunk in batched(np.arange(len(scenes)), batch_size):
            images, targets = scenes_to_batch(scenes, chunk, dtype=model.dtype)
            out = model.forward(images, rho=rho, record=True,
                                selection_seeds=scene_ids[chunk])
            preds.extend(model.detections(out))
            gts.extend(targets)
            dam = build_dam(out.records, out.enc_feat)
            near = build_dam(out.records, out.enc_feat, kernel="nearest")
            for i in range(len(chunk)):
                row_mask = dataclasses.replace(
                    out.selection, selected=out.selection.selected[i:i + 1],
                    counts=out.selection.counts[i:i + 1])
                corrs.append(corr_metric(dam[i:i + 1], row_mask,
                                         reference_set=(near[i:i + 1] > 0)).corr)
                nonzeros.append(dam_nonzero_ratio(near[i:i + 1],
                                                  out.feat.pad_mask[i:i + 1]))
    res = average_precision(preds, gts)
    res["corr"] = float(np.mean(corrs)) if corrs else 1.0
    res["dam_nonzero"] = float(np.mean(nonzeros)) if nonzeros else 0.0
    return res


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c, 0.0)) for c in columns) + "\n")


def train_run(run: RunConfig, out_dir: str, train_data: list[Scene] | None = None,
              eval_data: list[Scene] | None = None, log_name: str = "train_log.csv",
              quiet: bool = True) -> dict:
    """Train to completion; writes the per-epoch CSV and a final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = train_data if train_data is not None else \
        [generate_scene(run.scene, i) for i in range(run.train_scenes)]
    eval_set = eval_data if eval_data is not None else eval_scenes_for(run)

    model = SparseDetector(run.model, seed=run.seed, dtype=np.float32)
    opt = Adam(model.parameters(), lr=run.lr, weight_decay=run.weight_decay)
    shuffle_rng = np.random.default_rng([run.seed, 0xBA7C4])
    loss_rng = np.random.default_rng([run.seed, 0x5EED])
    rows = []
    for epoch in range(1, run.epochs + 1):
        opt.lr = run.lr * (run.lr_decay_factor if epoch > run.lr_decay_epoch else 1.0)
        order = shuffle_rng.permutation(len(scenes))
        sums: dict[str, float] = {}
        n_batches = 0
        for chunk in batched(order, run.batch_size):
            images, targets = scenes_to_batch(scenes, chunk)
            opt.zero_grad()
            with T.tape() as tp:
                outs = model.forward(images, selection_seeds=chunk.astype(np.int64))
                loss, breakdown = total_loss(outs, targets, run.model, rng=loss_rng)
                tp.backward(loss)
            clip_gradients(model.parameters(), run.clip_norm)
            opt.step()
            n_batches += 1
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
        subset = eval_set
        if run.eval_subset and epoch < run.epochs:
            subset = eval_set[:run.eval_subset]
        stats = evaluate_model(model, subset, run.model.rho, run.batch_size)
        row = {
            "epoch": epoch,
            "loss_total": sums.get("total", 0.0) / n_batches,
            "loss_final_cls": sums.get("final_cls", 0.0) / n_batches,
            "loss_final_l1": sums.get("final_l1", 0.0) / n_batches,
            "loss_final_giou": sums.get("final_giou", 0.0) / n_batches,
            "loss_dec_aux": sums.get("dec_aux", 0.0) / n_batches,
            "loss_enc_aux": sums.get("enc_aux", 0.0) / n_batches,
            "loss_topk": sums.get("topk", 0.0) / n_batches,
            "loss_os": sums.get("os", 0.0) / n_batches,
            "loss_dam": sums.get("dam", 0.0) / n_batches,
            "ap": stats["map"],
            "ap50": stats["ap50"],
            "corr": stats["corr"],
            "dam_nonzero": stats["dam_nonzero"],
        }
        rows.append(row)
        if not quiet:
            print(f"epoch {epoch}: loss {row['loss_total']:.4f} ap {row['ap']:.4f} "
                  f"corr {row['corr']:.4f}", flush=True)
    write_csv(out / log_name, TRAIN_LOG_COLUMNS, rows)
    ckpt = out / "checkpoint.sdtr"
    model.save(str(ckpt))
    (out / "config.kv").write_text(config_text(run))
    return {"rows": rows, "final": rows[-1] if rows else {}, "checkpoint": str(ckpt),
            "log": str(out / log_name), "model": model}


# ---------------------------------------------------------------------------
# parallel sweep cells
# ---------------------------------------------------------------------------

def train_cell(run: RunConfig, out_dir: str, dataset: str | None = None) -> dict:
    """Worker-safe training call: loads or regenerates data, drops the model."""
    single_threaded_blas()
    data = import_dataset(dataset) if dataset else None
    summary = train_run(run, out_dir, train_data=data, quiet=True)
    summary.pop("model")
    return summary


def run_cells(cells: list[tuple[RunConfig, str]], jobs: int = 1,
              dataset: str | None = None) -> list[dict]:
    """Train independent cells, optionally in parallel worker processes."""
    if jobs <= 1 or len(cells) <= 1:
        return [train_cell(run, out, dataset) for run, out in cells]
    import concurrent.futures as cf
    with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(train_cell, run, out, dataset) for run, out in cells]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_run(args) -> RunConfig:
    run = parse_config(args.config)
    if getattr(args, "rho", None) is not None:
        run.model = dataclasses.replace(run.model, rho=args.rho)
    if getattr(args, "criterion", None):
        run.model = dataclasses.replace(run.model, criterion=args.criterion)
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    return run


def cmd_train(args) -> int:
    run = _load_run(args)
    data = load_training_data(run, args.dataset, args.synthetic)
    summary = train_run(run, args.out, train_data=data, quiet=args.quiet)
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"log: {summary['log']}")
    final = summary["final"]
    print(f"final: ap={final['ap']:.4f} corr={final['corr']:.4f}")
    return 0


def _restore(args) -> tuple[RunConfig, SparseDetector]:
    run = parse_config(args.config)
    model = SparseDetector(run.model, seed=run.seed, dtype=np.float32)
    model.load(args.checkpoint)
    return run, model


def cmd_eval(args) -> int:
    run, model = _restore(args)
    rhos = [float(r) for r in str(args.rho_infer).split(",")]
    for r in rhos:
        if not 0.0 <= r <= 1.0:
            raise ContractError(f"--rho-infer must lie in [0, 1], got {r}")
    eval_set = import_dataset(args.dataset) if args.dataset else eval_scenes_for(run)
    rows = []
    for r in rhos:
        stats = evaluate_model(model, eval_set, r, run.batch_size)
        rep = attention_flop_count(run.model, r, image_size=run.scene.image_size)
        rows.append({
            "rho_infer": r, "ap": stats["map"], "ap50": stats["ap50"],
            "corr": stats["corr"], "dam_nonzero": stats["dam_nonzero"],
            "encoder_pairs": rep.encoder_pairs,
            "decoder_self_pairs": rep.decoder_self_pairs,
            "decoder_cross_pairs": rep.decoder_cross_pairs,
            "total_pairs": rep.total_pairs,
        })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    write_csv(path, EVAL_COLUMNS, rows)
    print(f"eval: {path}")
    for row in rows:
        print(f"rho={row['rho_infer']:g} ap={row['ap']:.4f} corr={row['corr']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    run = parse_config(args.config)
    rhos = [float(r) for r in args.rhos.split(",")] if args.rhos else []
    criteria = [c.strip() for c in args.criteria.split(",")] if args.criteria else []
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [run.seed]
    if not rhos or not criteria:
        raise ContractError("sweep needs non-empty --rhos and --criteria")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        try:
            seed_s, n_s = args.synthetic.split(":")
            run = dataclasses.replace(
                run, train_scenes=int(n_s),
                scene=dataclasses.replace(run.scene, seed=int(seed_s)))
        except ValueError:
            raise ContractError(f"--synthetic expects '<seed>:<n>', got {args.synthetic!r}") from None
    cells = []
    keys = []
    for criterion in criteria:
        for rho in rhos:
            for seed in seeds:
                cell = dataclasses.replace(run, seed=seed,
                                           model=dataclasses.replace(run.model, rho=rho,
                                                                     criterion=criterion))
                cell_dir = out / f"{criterion}_rho{rho:g}_seed{seed}"
                cells.append((cell, str(cell_dir)))
                keys.append((criterion, rho, seed))
    summaries = run_cells(cells, jobs=args.jobs, dataset=args.dataset)
    ap_rows, corr_rows = [], []
    for (criterion, rho, seed), summary in zip(keys, summaries):
        final = summary["final"]
        ap_rows.append({"criterion": criterion, "rho": rho, "seed": seed,
                        "ap": final["ap"], "ap50": final["ap50"],
                        "corr": final["corr"], "dam_nonzero": final["dam_nonzero"]})
        for row in summary["rows"]:
            corr_rows.append({"criterion": criterion, "rho": rho, "seed": seed,
                              "epoch": row["epoch"], "corr": row["corr"]})
    write_csv(out / "sweep_ap.csv", SWEEP_AP_COLUMNS, ap_rows)
    write_csv(out / "sweep_corr.csv", SWEEP_CORR_COLUMNS, corr_rows)
    print(f"sweep: {out / 'sweep_ap.csv'} ({len(ap_rows)} rows)")
    return 0


def cmd_report(args) -> int:
    run, model = _restore(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.dump
    if kind == "flops":
        rep = attention_flop_count(run.model, run.model.rho,
                                   image_size=run.scene.image_size)
        row = {c: getattr(rep, c) for c in FLOPS_COLUMNS if c != "total_pairs"}
        row["total_pairs"] = rep.total_pairs
        write_csv(out / "flops.csv", FLOPS_COLUMNS, [row])
        print(f"flops: {out / 'flops.csv'}")
        return 0
    if kind in ("mask", "dam"):
        scene = generate_scene(run.scene, EVAL_INDEX_OFFSET + args.scene_index)
        with T.no_grad():
            images, _ = scenes_to_batch([scene], [0], dtype=model.dtype)
            outs = model.forward(images, record=True,
                                 selection_seeds=np.array([EVAL_INDEX_OFFSET + args.scene_index]))
        if kind == "mask":
            path = out / "mask.bin"
            dump_selection_mask(outs.selection.selected[0], outs.feat.levels, str(path))
        else:
            dam = build_dam(outs.records, outs.enc_feat)
            path = out / "dam.bin"
            dump_dam(dam[0], outs.feat.levels, str(path))
        print(f"{kind}: {path}")
        return 0
    if kind == "gradnorm":
        scenes = [generate_scene(run.scene, i) for i in range(args.batches * run.batch_size)]
        sums: dict[str, float] = {}
        loss_rng = np.random.default_rng([run.seed, 0x5EED])
        for chunk in batched(np.arange(len(scenes)), run.batch_size):
            images, targets = scenes_to_batch(scenes, chunk, dtype=model.dtype)
            model.zero_grad()
            with T.tape() as tp:
                outs = model.forward(images, selection_seeds=chunk.astype(np.int64))
                loss, _ = total_loss(outs, targets, run.model, rng=loss_rng)
                tp.backward(loss)
            for label, norm in layerwise_grad_norm(model).items():
                sums[label] = sums.get(label, 0.0) + norm
        rows = [{"layer": k, "grad_norm": v / args.batches} for k, v in sums.items()]
        write_csv(out / "gradnorm.csv", GRADNORM_COLUMNS, rows)
        print(f"gradnorm: {out / 'gradnorm.csv'}")
        return 0
    raise ContractError(f"unknown dump kind {kind!r} (expected mask, dam, gradnorm or flops)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdetr",
                                description="token-sparsified detection transformer driver")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="flat key = value run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--dataset", default=None, help="SDDS1 dataset path")
        sp.add_argument("--synthetic", default=None, help="'<seed>:<n>' synthetic train set")
        sp.add_argument("--quiet", action="store_true", default=False)

    tr = sub.add_parser("train", help="train a model per the config")
    common(tr)
    tr.add_argument("--rho", type=float, default=None)
    tr.add_argument("--criterion", choices=("random", "os", "dam"), default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint at inference keeping ratios")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--rho-infer", dest="rho_infer", required=True,
                    help="keeping ratio, or comma-separated list")
    ev.add_argument("--dataset", default=None)
    ev.set_defaults(fn=cmd_eval)

    sw = sub.add_parser("sweep", help="train a (criterion, rho, seed) grid")
    common(sw)
    sw.add_argument("--rhos", required=True, help="comma-separated keeping ratios")
    sw.add_argument("--criteria", required=True, help="comma-separated criteria")
    sw.add_argument("--seeds", default=None, help="comma-separated seeds")
    sw.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    sw.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("report", help="dump mask/dam/gradnorm/flops artifacts")
    rp.add_argument("--config", required=True)
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--dump", required=True)
    rp.add_argument("--scene-index", dest="scene_index", type=int, default=0)
    rp.add_argument("--batches", type=int, default=4)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    single_threaded_blas()
    try:
        return args.fn(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
