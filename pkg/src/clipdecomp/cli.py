"""Command-line front end: ``clipdecomp <command> [options]``.

Every command writes its results as canonical JSON (and archives where
relevant) and a run manifest ``<out>.manifest.json`` recording the input
hashes, the effective configuration and library versions. Failures exit with
code 1 and a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from clipdecomp import __version__
from clipdecomp.applications import (
    Heatmap,
    SegmentationAccumulator,
    bias_normalize,
    binarize,
    class_heatmaps,
    joint_heatmap,
    rank_by_inner_product,
    seg_metrics,
    token_heatmap,
    worst_group_accuracy,
)
from clipdecomp.archive import load_archive, save_archive
from clipdecomp.decomposition import (
    AblationSpec,
    apply_ablation,
    build_mean_bank,
    classify_batch,
    decompose_image,
    head_contributions,
    reconstruct,
)
from clipdecomp.io import (
    dump_json,
    file_sha256,
    heatmap_to_pgm,
    load_class_bank,
    load_decompositions,
    load_head_basis,
    load_heatmap_json,
    load_images,
    load_mean_bank,
    load_text_bank,
    save_decompositions,
    save_head_basis,
    save_heatmap_json,
    save_mean_bank,
)
from clipdecomp.model import (
    load_model,
    random_image,
    random_model,
    reference_forward,
    save_model,
)
from clipdecomp.textspan import project_heads, textspan

# options naming files that must exist before a command runs
INPUT_PATHS = (
    "model", "image", "decomp", "mean_bank", "classes", "labels", "bank", "contrib",
    "gt", "text_dir", "query_decomp", "heatmap", "basis", "spec",
)
# options that never influence results and stay out of manifests
EXECUTION_ONLY = ("threads", "config", "func")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def parallel_map(fn, items, threads: int):
    """Ordered map; the result order never depends on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_outputs(args, out_path: str | Path, record: dict, extra_outputs=()) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix == ".json":
        dump_json(record, out_path)
    manifest = {
        "command": args.command,
        "config": _config_dict(args),
        "inputs": _input_hashes(args),
        "outputs": sorted(str(p) for p in (out_path, *extra_outputs)),
        "versions": {
            "clipdecomp": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    dump_json(manifest, out_path.with_name(out_path.stem + ".manifest.json"))


def _config_dict(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in EXECUTION_ONLY:
            continue
        out[k] = v
    return out


def _input_hashes(args) -> dict:
    hashes = {}
    for name in INPUT_PATHS:
        val = getattr(args, name, None)
        for p in val if isinstance(val, list) else [val]:
            if p is None or p == "empty":
                continue
            if Path(p).is_file():
                hashes[str(p)] = file_sha256(p)
            for sibling in (Path(p).with_suffix(".json"), Path(str(p) + ".nta")):
                if sibling.exists() and sibling != Path(p):
                    hashes[str(sibling)] = file_sha256(sibling)
    return dict(sorted(hashes.items()))


def _check_paths(args) -> None:
    for name in INPUT_PATHS:
        val = getattr(args, name, None)
        for p in val if isinstance(val, list) else [val]:
            if p is None or (name == "spec" and p == "empty"):
                continue
            # a head basis is named by its stem (<stem>.json + <stem>.nta)
            probe = Path(p).with_suffix(".json") if name == "basis" else Path(p)
            if not probe.exists():
                raise FileNotFoundError(f"--{name.replace('_', '-')}: no such file {p}")


def _load_labels(path, n: int) -> tuple[list[int], list | None]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        labels, groups = data, None
    else:
        labels, groups = data["labels"], data.get("groups")
    if len(labels) != n or (groups is not None and len(groups) != n):
        raise ValueError(f"{path}: {len(labels)} labels for {n} images")
    return [int(x) for x in labels], groups


def _parse_heads(text: str | None) -> list[tuple[int, int]]:
    if not text:
        return []
    heads = []
    for item in text.split(","):
        l, _, h = item.strip().partition(".")
        heads.append((int(l), int(h)))
    return heads


def _accuracy_record(preds, labels, groups) -> dict:
    rec = {"accuracy": float(np.mean(np.asarray(preds) == np.asarray(labels))) if labels is not None else None}
    if groups is not None:
        worst, table = worst_group_accuracy(preds, labels, groups)
        rec["worst_group_accuracy"] = worst
        rec["per_group"] = {str(g): a for g, a in table.items()}
    return rec


# -- commands ----------------------------------------------------------------


def cmd_make_toy(args):
    rng = np.random.default_rng(args.seed)
    model = random_model(
        rng,
        num_layers=args.layers,
        num_heads=args.heads,
        width=args.width,
        output_dim=args.output_dim,
        patch_size=args.patch,
        grid=(args.grid, args.grid),
        ln_pre=args.ln_pre,
    )
    save_model(model, args.out)
    outputs = [args.out, Path(args.out).with_suffix(".json")]
    if args.images:
        imgs = np.stack([random_image(rng, model.config).pixels for _ in range(args.images)])
        save_archive({"images": imgs}, args.images_out)
        outputs.append(args.images_out)
    write_outputs(args, Path(args.out).with_suffix(".run.json"), {"model_hash": model.digest}, outputs)


def _images(args, model):
    images = []
    for p in args.image:
        images.extend(load_images(p, model.config.image_size))
    return images


class DecompStream:
    """Re-iterable source of decompositions, in a fixed order.

    Reads ledger files (``--decomp``) one at a time, or decomposes images
    (``--model`` with ``--image``) on the fly in small parallel chunks. Either
    way only a chunk of full ledgers is alive at once, so commands that reduce
    each image to a few vectors run in bounded memory.
    """

    def __init__(self, args):
        self.paths = list(getattr(args, "decomp", None) or [])
        self.model_path = getattr(args, "model", None)
        self.image_paths = list(getattr(args, "image", None) or [])
        self.threads = max(1, args.threads)
        if not self.paths and not (self.model_path and self.image_paths):
            raise ValueError("give --decomp ledger files, or --model together with --image")
        self._model = None

    @property
    def model(self):
        if self._model is None:
            self._model = load_model(self.model_path)
        return self._model

    def __iter__(self):
        if self.paths:
            for p in self.paths:
                yield from load_decompositions(p)
            return
        model = self.model
        chunk = 2 * self.threads
        for p in self.image_paths:
            images = load_images(p, model.config.image_size)
            for i in range(0, len(images), chunk):
                yield from parallel_map(lambda im: decompose_image(model, im), images[i : i + chunk], self.threads)

    def nth(self, index: int):
        count = 0
        for d in self:
            if count == index:
                return d
            count += 1
        raise IndexError(f"image index {index} outside the {count} given images")


def _mean_bank(args, stream: DecompStream):
    if args.mean_bank:
        return load_mean_bank(args.mean_bank)
    return build_mean_bank(stream, "self")


def cmd_decompose(args):
    model = load_model(args.model)
    images = _images(args, model)
    decomps = parallel_map(lambda im: decompose_image(model, im), images, args.threads)
    save_decompositions(decomps, args.out, model.digest)
    write_outputs(args, args.out, {}, [Path(args.out).with_suffix(".json")])


def cmd_classify(args):
    bank = load_class_bank(args.classes)
    if args.model:
        model = load_model(args.model)
        images = _images(args, model)
        reps = parallel_map(lambda im: reference_forward(model, im), images, args.threads)
        ids = [im.image_id for im in images]
        source = "reference_forward"
    else:
        reps, ids = [], []
        for d in DecompStream(args):
            reps.append(reconstruct(d))
            ids.append(d.image_id)
        source = "reconstruct"
    preds = classify_batch(np.stack(reps), bank).tolist()
    labels, groups = _load_labels(args.labels, len(preds)) if args.labels else (None, None)
    record = {
        "experiment": "zero_shot_classification",
        "source": source,
        "num_images": len(preds),
        "predictions": [{"id": i, "class": p, "name": bank.names[p]} for i, p in zip(ids, preds)],
        **_accuracy_record(preds, labels, groups),
    }
    write_outputs(args, args.out, record)


def cmd_mean_bank(args):
    inputs = args.decomp or args.image
    bank = build_mean_bank(DecompStream(args), source=args.source or ",".join(inputs))
    save_mean_bank(bank, args.out)
    write_outputs(args, args.out, {}, [Path(args.out).with_suffix(".json")])


def _spec_from_args(args) -> AblationSpec:
    if args.spec and args.spec != "empty":
        base = AblationSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        base = AblationSpec(mode=args.mode)
    flags = AblationSpec(
        mlps=args.mlps,
        msa_prefix=args.msa_prefix,
        heads=frozenset(_parse_heads(args.heads)),
        cls_token=args.cls_token,
        init=args.init,
        mode=base.mode,
    )
    return base.union(flags)


def cmd_ablate(args):
    stream = DecompStream(args)
    bank_cls = load_class_bank(args.classes)
    spec = _spec_from_args(args)
    means = _mean_bank(args, stream)
    L, H = means.msa_terms.shape[1:3]

    # every variant is evaluated in one pass, so each ledger is visited once
    variants = {"base": AblationSpec(mode=spec.mode), "ablated": spec}
    if args.sweep_msa:
        for k in range(L + 1):
            variants[f"sweep{k}"] = spec.union(AblationSpec(msa_prefix=k, mode=spec.mode))
    picks = []
    if args.random_heads:
        rng = np.random.default_rng(args.seed)
        pool = [(l, h) for l in range(L) for h in range(H)]
        for t in range(args.trials):
            pick = sorted(pool[i] for i in rng.choice(len(pool), size=args.random_heads, replace=False))
            picks.append(pick)
            variants[f"random{t}"] = AblationSpec(heads=frozenset(pick), mode=spec.mode)
    reps = {name: [] for name in variants}
    ids = []
    for d in stream:
        ids.append(d.image_id)
        for name, s in variants.items():
            reps[name].append(apply_ablation(d, s, means))
    labels, groups = _load_labels(args.labels, len(ids)) if args.labels else (None, None)
    preds = {name: classify_batch(np.stack(r), bank_cls).tolist() for name, r in reps.items()}

    def result(name):
        return _accuracy_record(preds[name], labels, groups)

    record = {
        "experiment": "mean_ablation" if spec.mode == "mean" else "zero_ablation",
        "spec": spec.to_dict(),
        "num_images": len(ids),
        "mean_bank_count": means.count,
        "base": result("base"),
        "ablated": result("ablated"),
        "predictions": [{"id": i, "class": p} for i, p in zip(ids, preds["ablated"])],
        "msa_prefix_sweep": None,
        "random_heads": None,
    }
    if args.sweep_msa:
        record["msa_prefix_sweep"] = [{"msa_prefix": k, **result(f"sweep{k}")} for k in range(L + 1)]
    if args.random_heads:
        trials = [{"heads": [list(x) for x in pick], **result(f"random{t}")} for t, pick in enumerate(picks)]
        key = "worst_group_accuracy" if groups is not None else "accuracy"
        top = max(trials, key=lambda t: (t[key] if t[key] is not None else -1.0))
        record["random_heads"] = {"num_heads": args.random_heads, "seed": args.seed, "trials": trials, "top": top}
    write_outputs(args, args.out, record)


def _selected_heads(args, L: int, H: int) -> list[tuple[int, int]]:
    if args.last_layers:
        heads = [(l, h) for l in range(L - args.last_layers, L) for h in range(H)]
    elif args.heads:
        heads = _parse_heads(args.heads)
    elif args.layer is not None and args.head is not None:
        heads = [(args.layer, args.head)]
    else:
        raise ValueError("select heads with --layer/--head, --heads or --last-layers")
    for l, h in heads:
        if not (0 <= l < L and 0 <= h < H):
            raise IndexError(f"head ({l}, {h}) outside a {L} x {H} model")
    return heads


def cmd_textspan(args):
    bank = load_text_bank(args.bank)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.contrib:
        t = load_archive(args.contrib)
        c = t.get("C", t.get("contributions"))
        if c is None:
            raise ValueError(f"{args.contrib}: expected tensor 'C' or 'contributions'")
        basis = textspan(c, bank, args.m)
        save_head_basis(basis, out_dir / "basis")
        outputs += [out_dir / "basis.json", out_dir / "basis.nta"]
        record = {"experiment": "textspan", "pool": bank.provenance, "m": args.m, "bases": [basis.to_json()]}
        write_outputs(args, out_dir / "textspan.json", record, outputs)
        return

    project = args.project_and_classify
    if project and not (args.classes and args.labels):
        raise ValueError("--project-and-classify needs --classes and --labels")
    stream = DecompStream(args)
    # per image keep only the selected heads' outputs and the full representation
    heads, rows, full = None, [], []
    for d in stream:
        if heads is None:
            heads = _selected_heads(args, d.num_layers, d.num_heads)
            index = tuple(np.array(heads).T)
        rows.append(head_contributions(d)[index])
        if project:
            full.append(reconstruct(d))
    if heads is None:
        raise ValueError("no images given")
    per_head = np.stack(rows, axis=1)  # (heads, K, d')
    bases = parallel_map(
        lambda j: textspan(per_head[j], bank, args.m, layer=heads[j][0], head=heads[j][1]),
        range(len(heads)),
        args.threads,
    )
    for basis in bases:
        stem = out_dir / f"L{basis.layer}H{basis.head}"
        save_head_basis(basis, stem)
        outputs += [stem.with_suffix(".json"), stem.with_suffix(".nta")]
    record = {
        "experiment": "textspan",
        "pool": bank.provenance,
        "m": args.m,
        "num_images": per_head.shape[1],
        "bases": [b.to_json() for b in bases],
        "projection": None,
    }
    if project:
        classes = load_class_bank(args.classes)
        labels, groups = _load_labels(args.labels, per_head.shape[1])
        means = _mean_bank(args, stream)
        by_head = {(b.layer, b.head): b for b in bases}
        base_preds = classify_batch(np.stack(full), classes).tolist()
        projected = [
            project_heads({lh: per_head[j, k] for j, lh in enumerate(heads)}, by_head, means)
            for k in range(per_head.shape[1])
        ]
        proj_preds = classify_batch(np.stack(projected), classes).tolist()
        record["projection"] = {
            "experiment": "textspan_projection",
            "pool": bank.provenance,
            "m": args.m,
            "heads": [list(x) for x in heads],
            "base_accuracy": _accuracy_record(base_preds, labels, groups)["accuracy"],
            "projected_accuracy": _accuracy_record(proj_preds, labels, groups)["accuracy"],
        }
    write_outputs(args, out_dir / "textspan.json", record, outputs)


def _text_direction(args, dim: int) -> np.ndarray | None:
    if args.text_dir:
        t = load_archive(args.text_dir)
        v = t.get("direction", next(iter(t.values())))
        return np.asarray(v, dtype=np.float64).reshape(dim)
    if getattr(args, "basis", None):
        return load_head_basis(args.basis).components[args.text_index]
    if getattr(args, "bank", None):
        return load_text_bank(args.bank).embeddings[args.text_index].astype(np.float64)
    return None


def cmd_segment(args):
    t = load_archive(args.gt)
    gt = t.get("gt", t.get("masks"))
    if gt is None:
        raise ValueError(f"{args.gt}: expected tensor 'gt' or 'masks'")
    if gt.ndim == 2:
        gt = gt[None]
    classes = load_class_bank(args.classes) if args.classes else None
    labels = _load_labels(args.labels, len(gt))[0] if args.labels else None
    if not args.text_dir and classes is None:
        raise ValueError("segment needs --text-dir or --classes with --labels")
    if not args.text_dir and labels is None:
        raise ValueError("--classes needs --labels to pick each image's class")
    mode = "bilinear" if args.bilinear else "nearest"
    if args.heatmap_dir:
        Path(args.heatmap_dir).mkdir(parents=True, exist_ok=True)

    acc = SegmentationAccumulator()
    per_image = []
    fixed, factor, count = None, None, 0
    for b, d in enumerate(DecompStream(args)):
        if b >= len(gt):
            raise ValueError(f"{len(gt)} ground-truth masks for more images")
        if factor is None:
            factor = args.upsample or gt.shape[1] // d.grid[0]
            fixed = _text_direction(args, d.output_dim)
        direction = fixed if fixed is not None else classes.embeddings[labels[b]].astype(np.float64)
        h = token_heatmap(d, direction)
        if classes is not None and not args.no_bias_normalize:
            h = bias_normalize(h, [Heatmap(g) for g in class_heatmaps(d, classes.embeddings)])
        mask = binarize(h, args.threshold)
        acc.add(h, mask, gt[b] > 0.5, factor, mode)
        m = seg_metrics(h, mask, gt[b] > 0.5, factor, mode)
        per_image.append({"id": d.image_id, **m.to_json()})
        if args.heatmap_dir:
            save_heatmap_json(h, Path(args.heatmap_dir) / f"heatmap_{b:05d}.json")
        count += 1
    if count != len(gt):
        raise ValueError(f"{len(gt)} ground-truth masks for {count} images")
    total = acc.result()
    record = {
        "experiment": "segmentation",
        "num_images": count,
        "upsample": factor,
        "interpolation": mode,
        "threshold": "mean" if args.threshold is None else args.threshold,
        "bias_normalized": classes is not None and not args.no_bias_normalize,
        **total.to_json(),
        "per_image": per_image,
    }
    write_outputs(args, args.out, record)


def cmd_retrieve(args):
    feats, ids, query = [], [], None
    for i, g in enumerate(DecompStream(args)):
        L, H = g.num_layers, g.num_heads
        if not (0 <= args.layer < L and 0 <= args.head < H):
            raise IndexError(f"head ({args.layer}, {args.head}) outside a {L} x {H} model")
        feats.append(head_contributions(g)[args.layer, args.head].astype(np.float64))
        ids.append(g.image_id)
        if i == args.query_index and not args.query_decomp:
            query = (g.image_id, feats[-1])
    skip = None
    if args.query_decomp:
        q = load_decompositions(args.query_decomp)[args.query_index]
        query = (q.image_id, head_contributions(q)[args.layer, args.head].astype(np.float64))
    elif query is None:
        raise IndexError(f"query index {args.query_index} outside the {len(ids)} gallery images")
    elif args.exclude_query:
        skip = args.query_index
    keep = [i for i in range(len(ids)) if i != skip]
    k = min(args.k, len(keep))
    res = rank_by_inner_product(query[1], np.stack([feats[i] for i in keep]), [ids[i] for i in keep], k)
    record = {
        "experiment": "head_retrieval",
        "query": query[0],
        "layer": args.layer,
        "head": args.head,
        "results": [
            {"rank": r, "index": keep[i], "id": s, "score": v}
            for r, (i, s, v) in enumerate(zip(res.indices, res.ids, res.scores))
        ],
    }
    write_outputs(args, args.out, record)


def _heatmap_outputs(args, h: Heatmap):
    save_heatmap_json(h, args.out)
    extra = []
    if args.pgm:
        Path(args.pgm).write_bytes(heatmap_to_pgm(h, args.scale))
        extra.append(args.pgm)
    write_outputs(args, args.out, h.to_json(), extra)


def cmd_heatmap(args):
    d = DecompStream(args).nth(args.index)
    direction = _text_direction(args, d.output_dim)
    if direction is None:
        raise ValueError("need --text-dir, --bank or --basis for the text direction")
    _heatmap_outputs(args, token_heatmap(d, direction))


def cmd_joint_heatmap(args):
    d = DecompStream(args).nth(args.index)
    direction = _text_direction(args, d.output_dim)
    if direction is None:
        raise ValueError("need --text-dir, --bank or --basis for the text direction")
    _heatmap_outputs(args, joint_heatmap(d, args.layer, args.head, direction))


def cmd_render_pgm(args):
    h = load_heatmap_json(args.heatmap)
    Path(args.out).write_bytes(heatmap_to_pgm(h, args.scale))


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clipdecomp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add_source(sp, *more):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--decomp", nargs="+", help="ledger files")
        src.add_argument("--model", help="decompose --image files on the fly instead of reading ledgers")
        for flag, help_ in more:
            src.add_argument(flag, help=help_)
        sp.add_argument("--image", nargs="+")

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON file of option values (keys are option names)")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = command("make-toy", cmd_make_toy, "write a random toy model (and images)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=2)
    sp.add_argument("--width", type=int, default=8)
    sp.add_argument("--output-dim", type=int, default=4)
    sp.add_argument("--patch", type=int, default=2)
    sp.add_argument("--grid", type=int, default=2)
    sp.add_argument("--ln-pre", action="store_true")
    sp.add_argument("--images", type=int, default=0)
    sp.add_argument("--images-out", default="images.nta")

    sp = command("decompose", cmd_decompose, "decompose images into direct-effect terms")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", nargs="+", required=True)
    sp.add_argument("--out", required=True)

    sp = command("classify", cmd_classify, "zero-shot classification")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--decomp", nargs="+")
    sp.add_argument("--image", nargs="+")
    sp.add_argument("--classes", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)

    sp = command("mean-bank", cmd_mean_bank, "average decompositions into a mean bank")
    add_source(sp)
    sp.add_argument("--source", default="")
    sp.add_argument("--out", required=True)

    sp = command("ablate", cmd_ablate, "mean/zero ablation of ledger terms")
    add_source(sp)
    sp.add_argument("--classes", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--mean-bank")
    sp.add_argument("--spec", help="ablation spec JSON file, or 'empty'")
    sp.add_argument("--mode", choices=("mean", "zero"), default="mean")
    sp.add_argument("--mlps", action="store_true")
    sp.add_argument("--msa-prefix", type=int, default=0)
    sp.add_argument("--heads", help="comma list of layer.head, zero-based")
    sp.add_argument("--cls-token", action="store_true")
    sp.add_argument("--init", action="store_true")
    sp.add_argument("--sweep-msa", action="store_true")
    sp.add_argument("--random-heads", type=int, default=0)
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--out", required=True)

    sp = command("textspan", cmd_textspan, "greedy text bases for head outputs")
    add_source(sp, ("--contrib", "archive with a K x d' tensor 'C'"))
    sp.add_argument("--bank", required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--head", type=int)
    sp.add_argument("--heads")
    sp.add_argument("--last-layers", type=int, default=0)
    sp.add_argument("--project-and-classify", action="store_true")
    sp.add_argument("--classes")
    sp.add_argument("--labels")
    sp.add_argument("--mean-bank")
    sp.add_argument("--out-dir", required=True)

    sp = command("segment", cmd_segment, "zero-shot segmentation and metrics")
    add_source(sp)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--text-dir")
    sp.add_argument("--classes")
    sp.add_argument("--labels")
    sp.add_argument("--upsample", type=int, default=0)
    sp.add_argument("--threshold", type=float, default=None)
    sp.add_argument("--bilinear", action="store_true")
    sp.add_argument("--no-bias-normalize", action="store_true")
    sp.add_argument("--heatmap-dir")
    sp.add_argument("--out", required=True)

    sp = command("retrieve", cmd_retrieve, "nearest neighbours by one head's contribution")
    add_source(sp)
    sp.add_argument("--query-decomp")
    sp.add_argument("--query-index", type=int, default=0)
    sp.add_argument("--exclude-query", action="store_true")
    sp.add_argument("--layer", type=int, required=True)
    sp.add_argument("--head", type=int, required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out", required=True)

    for name, func, help_ in (
        ("heatmap", cmd_heatmap, "per-patch heatmap for one text direction"),
        ("joint-heatmap", cmd_joint_heatmap, "per-head per-patch heatmap for one text direction"),
    ):
        sp = command(name, func, help_)
        add_source(sp)
        sp.add_argument("--index", type=int, default=0)
        if name == "joint-heatmap":
            sp.add_argument("--layer", type=int, required=True)
            sp.add_argument("--head", type=int, required=True)
        sp.add_argument("--text-dir")
        sp.add_argument("--bank")
        sp.add_argument("--basis", help="head basis stem; uses component --text-index")
        sp.add_argument("--text-index", type=int, default=0)
        sp.add_argument("--pgm")
        sp.add_argument("--scale", type=int, default=1)
        sp.add_argument("--out", required=True)

    sp = command("render-pgm", cmd_render_pgm, "render a heatmap JSON as 8-bit PGM")
    sp.add_argument("--heatmap", required=True)
    sp.add_argument("--scale", type=int, default=1)
    sp.add_argument("--out", required=True)
    return p


def _peek(argv: list[str], flag: str) -> str | None:
    for i, tok in enumerate(argv):
        if tok == flag and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith(flag + "="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    cfg_path = _peek(argv, "--config")
    if cfg_path:
        cfg = json.loads(Path(cfg_path).read_text())
        if not isinstance(cfg, dict):
            raise CLIError(f"{cfg_path}: config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        choices = parser._subparsers._group_actions[0].choices
        command = next((tok for tok in argv if tok in choices), None)
        if command is None:
            raise CLIError("no command given")
        sub = choices[command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise CLIError(f"{cfg_path}: unknown options {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
        for group in sub._mutually_exclusive_groups:
            if any(a.dest in cfg for a in group._group_actions):
                group.required = False
        sub.set_defaults(**cfg)
    args = parser.parse_args(argv)
    _check_paths(args)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
