"""petverify command line: synth, train, fuse, eval, pairs, mcnemar, report.

Conventions shared by all subcommands:

* exit 0 on success, 1 on a domain error (with a one-line machine-readable
  JSON envelope on stderr), 2 on a usage error (argparse),
* every file-producing run also writes a RunManifest JSON recording the tool
  version, resolved flags, sha256 of every input file and the list of
  outputs; reruns with the same flags produce byte-identical files,
* outputs are written atomically, so a failed run never leaves partials.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__, report as presentation
from .core import (
    EmbeddingRecord,
    InvalidConfigError,
    LengthMismatchError,
    Modality,
    PetverifyError,
)
from .evalproto import evaluate, generate_pairs
from .fusion import (
    FusionStrategy,
    fuse,
    init_fusion_model,
    load_checkpoint,
    output_dim,
    save_checkpoint,
)
from .stats import correctness_vector, mcnemar
from .store import (
    canonical_json,
    file_digest,
    read_json,
    read_report,
    read_store,
    write_json,
    write_report,
    write_store,
    write_text_atomic,
)
from .synth import SynthConfig, config_to_dict, gen_population
from .trainer import TrainConfig, index_by_image, derive_seeds, train


def _write_manifest(
    path: Path,
    command: str,
    flags: dict[str, Any],
    inputs: Sequence[Path],
    outputs: Sequence[Path],
) -> None:
    write_json(
        path,
        {
            "tool": "petverify",
            "version": __version__,
            "command": command,
            "flags": flags,
            "inputs": {str(p): file_digest(p) for p in inputs},
            "outputs": [str(p) for p in outputs],
        },
    )


def _parse_ks(text: str) -> list[int]:
    try:
        ks = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from exc
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("k list needs integers >= 1")
    return ks


# --------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(
        seed=args.seed,
        n_identities=args.identities,
        images_per_identity=args.images_per_identity,
        dim_image=args.dim_image,
        dim_text=args.dim_text,
        noise_scale=args.noise,
        text_informativeness=args.informativeness,
        tokens_per_text=args.tokens,
    )
    images, texts = gen_population(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images_path = out / "images.pvem"
    texts_path = out / "texts.pvem"
    sidecar_path = out / "synth_config.json"
    write_store(images, images_path)
    write_store(texts, texts_path)
    write_json(sidecar_path, config_to_dict(config))
    _write_manifest(
        out / "synth.manifest.json",
        "synth",
        {**config_to_dict(config), "out_dir": str(out)},
        inputs=[],
        outputs=[images_path, texts_path, sidecar_path],
    )
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    if args.strategy != "none" and args.texts is None:
        args.parser.error("--texts is required unless --strategy none")
    images = read_store(args.images)
    texts = read_store(args.texts) if args.texts is not None else None
    config = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        n_identities_per_batch=args.batch_identities,
        seed=args.seed,
    )

    model = None
    if args.strategy != "none":
        if not images:
            raise InvalidConfigError("image store is empty")
        model_seed, _ = derive_seeds(args.seed, args.epochs)
        assert texts is not None
        model = init_fusion_model(
            FusionStrategy(args.strategy),
            dim_image=images[0].dim,
            dim_text=texts[0].dim if texts else 0,
            shared_dim=args.shared_dim,
            seed=model_seed,
        )
    trained, history = train(model, images, texts, config)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    if trained is not None:
        checkpoint_path = out / "model.ckpt"
        save_checkpoint(trained, checkpoint_path)
        outputs.extend([checkpoint_path, Path(str(checkpoint_path) + ".json")])
    history_path = out / "loss_history.json"
    write_json(
        history_path,
        {
            "strategy": args.strategy,
            "learning_rate": float(args.lr),
            "epochs": args.epochs,
            "batch_identities": args.batch_identities,
            "shared_dim": args.shared_dim,
            "seed": args.seed,
            "per_epoch_mean_loss": [float(x) for x in history],
        },
    )
    outputs.append(history_path)

    inputs = [Path(args.images)] + ([Path(args.texts)] if args.texts else [])
    _write_manifest(
        out / "train.manifest.json",
        "train",
        {
            "images": str(args.images),
            "texts": str(args.texts) if args.texts else None,
            "strategy": args.strategy,
            "lr": float(args.lr),
            "epochs": args.epochs,
            "batch_identities": args.batch_identities,
            "shared_dim": args.shared_dim,
            "seed": args.seed,
            "out_dir": str(out),
        },
        inputs=inputs,
        outputs=outputs,
    )
    return 0


# --------------------------------------------------------------------------
# fuse


def cmd_fuse(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    images = read_store(args.images)
    texts = index_by_image(read_store(args.texts), "text store")
    missing = [r.image_id for r in images if r.image_id not in texts]
    if missing:
        raise InvalidConfigError(
            f"{len(missing)} image(s) lack a text record, first: {missing[0]!r}"
        )
    fused = [
        EmbeddingRecord(
            identity_id=record.identity_id,
            image_id=record.image_id,
            modality=Modality.FUSED,
            vector=fuse(model, record.vector, texts[record.image_id].vector),
            dim=output_dim(model),
        )
        for record in images
    ]
    out_path = Path(args.out)
    write_store(fused, out_path)
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "fuse",
        {
            "checkpoint": str(args.checkpoint),
            "images": str(args.images),
            "texts": str(args.texts),
            "out": str(out_path),
        },
        inputs=[
            Path(args.checkpoint),
            Path(str(args.checkpoint) + ".json"),
            Path(args.images),
            Path(args.texts),
        ],
        outputs=[out_path],
    )
    return 0


# --------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    if args.emit_per_query is not None and 1 not in args.k:
        args.parser.error("--emit-per-query needs k=1 in --k")
    records = read_store(args.store)
    result = evaluate(
        records,
        usage_cap=args.usage_cap,
        per_identity_cap=args.identity_cap,
        seed=args.pairs_seed,
        ks=args.k,
        chunk_size=args.chunk_size,
        workers=args.workers,
    )
    out_path = Path(args.out)
    if out_path.parent != Path("."):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report(result.report, out_path)
    outputs = [out_path]
    if args.emit_per_query is not None:
        per_query_path = Path(args.emit_per_query)
        write_json(
            per_query_path,
            {
                "store": file_digest(args.store),
                "pairs_seed": args.pairs_seed,
                "k": 1,
                "query_ids": list(result.retrieval.query_ids),
                "top1": [bool(h) for h in result.retrieval.hits[1]],
            },
        )
        outputs.append(per_query_path)
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "eval",
        {
            "store": str(args.store),
            "pairs_seed": args.pairs_seed,
            "usage_cap": args.usage_cap,
            "identity_cap": args.identity_cap,
            "k": args.k,
            "workers": args.workers,
            "chunk_size": args.chunk_size,
            "out": str(out_path),
            "emit_per_query": str(args.emit_per_query) if args.emit_per_query else None,
        },
        inputs=[Path(args.store)],
        outputs=outputs,
    )
    return 0


# --------------------------------------------------------------------------
# pairs


def cmd_pairs(args: argparse.Namespace) -> int:
    records = read_store(args.store)
    pairs = generate_pairs(records, args.usage_cap, args.identity_cap, args.seed)
    out_path = Path(args.out)
    write_json(
        out_path,
        {
            "seed": pairs.seed,
            "usage_cap": pairs.usage_cap,
            "per_identity_cap": pairs.per_identity_cap,
            "positives": [[a, b] for a, b in pairs.positives],
            "negatives": [[a, b] for a, b in pairs.negatives],
        },
    )
    _write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "pairs",
        {
            "store": str(args.store),
            "seed": args.seed,
            "usage_cap": args.usage_cap,
            "identity_cap": args.identity_cap,
            "out": str(out_path),
        },
        inputs=[Path(args.store)],
        outputs=[out_path],
    )
    return 0


# --------------------------------------------------------------------------
# mcnemar


def _load_correctness(path: str) -> dict[str, Any]:
    payload = read_json(path)
    for key in ("query_ids", "top1"):
        if key not in payload:
            raise InvalidConfigError(f"{path}: missing {key!r} field")
    if len(payload["query_ids"]) != len(payload["top1"]):
        raise LengthMismatchError(f"{path}: query_ids and top1 lengths differ")
    return payload


def cmd_mcnemar(args: argparse.Namespace) -> int:
    row = _load_correctness(args.row)
    col = _load_correctness(args.col)
    if row["query_ids"] != col["query_ids"]:
        raise LengthMismatchError(
            "correctness files cover different query sets or orderings"
        )
    table = correctness_vector(
        [bool(x) for x in row["top1"]], [bool(x) for x in col["top1"]]
    )
    result = mcnemar(table)
    print(f"row: {args.row}")
    print(f"col: {args.col}")
    print(f"n_queries: {len(row['query_ids'])}")
    print(
        f"both_correct={table.both_correct} row_only={table.row_only_correct} "
        f"col_only={table.col_only_correct} both_incorrect={table.both_incorrect}"
    )
    print(
        f"chi2={result.chi2:.6g} p={result.p_value:.6g} "
        f"direction={result.direction.arrow} {result.direction.value}"
    )
    if args.out is not None:
        out_path = Path(args.out)
        write_json(
            out_path,
            {
                "chi2": float(result.chi2),
                "p_value": float(result.p_value),
                "direction": result.direction.value,
                "both_correct": table.both_correct,
                "row_only_correct": table.row_only_correct,
                "col_only_correct": table.col_only_correct,
                "both_incorrect": table.both_incorrect,
            },
        )
        _write_manifest(
            Path(str(out_path) + ".manifest.json"),
            "mcnemar",
            {"row": str(args.row), "col": str(args.col), "out": str(out_path)},
            inputs=[Path(args.row), Path(args.col)],
            outputs=[out_path],
        )
    return 0


# --------------------------------------------------------------------------
# report


def cmd_report(args: argparse.Namespace) -> int:
    names = args.names.split(",") if args.names else None
    if names is not None and len(names) != len(args.reports):
        args.parser.error("--names must list one name per report file")
    entries = []
    for position, path in enumerate(args.reports):
        name = names[position] if names else Path(path).stem
        entries.append((name, read_report(path)))
    table = presentation.render_table(entries)
    sys.stdout.write(table)

    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table_path = out / "metrics_table.txt"
        csv_path = out / "metrics.csv"
        presentation.write_csv(entries, csv_path)
        write_text_atomic(table_path, table)
        figure_paths = presentation.render_figures(entries, out)
        _write_manifest(
            out / "report.manifest.json",
            "report",
            {
                "reports": [str(p) for p in args.reports],
                "names": names,
                "out_dir": str(out),
            },
            inputs=[Path(p) for p in args.reports],
            outputs=[table_path, csv_path, *figure_paths],
        )
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petverify",
        description="Multimodal embedding fusion and verification metrics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic population")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--identities", type=int, default=58)
    synth.add_argument("--images-per-identity", "--images", type=int, default=6)
    synth.add_argument("--dim-image", type=int, default=768)
    synth.add_argument("--dim-text", type=int, default=768)
    synth.add_argument("--noise", "--sigma", type=float, default=0.05)
    synth.add_argument("--informativeness", "--rho", type=float, default=1.0)
    synth.add_argument("--tokens", type=int, default=4)
    synth.add_argument("--out-dir", default=".")
    synth.set_defaults(func=cmd_synth, parser=synth)

    tr = sub.add_parser("train", help="train a fusion head")
    tr.add_argument("--images", required=True)
    tr.add_argument("--texts", default=None)
    tr.add_argument(
        "--strategy",
        choices=["concat", "weighted", "xattn", "gated", "none"],
        default="gated",
    )
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch-identities", type=int, default=58)
    tr.add_argument("--shared-dim", type=int, default=256)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out-dir", default=".")
    tr.set_defaults(func=cmd_train, parser=tr)

    fu = sub.add_parser("fuse", help="apply a checkpoint, write a fused store")
    fu.add_argument("--checkpoint", required=True)
    fu.add_argument("--images", required=True)
    fu.add_argument("--texts", required=True)
    fu.add_argument("--out", default="fused.pvem")
    fu.set_defaults(func=cmd_fuse, parser=fu)

    ev = sub.add_parser("eval", help="evaluate a store")
    ev.add_argument("--store", required=True)
    ev.add_argument("--pairs-seed", type=int, default=0)
    ev.add_argument("--usage-cap", type=int, default=5)
    ev.add_argument("--identity-cap", type=int, default=15)
    ev.add_argument("--k", type=_parse_ks, default=[1, 5, 10])
    ev.add_argument("--workers", type=int, default=8)
    ev.add_argument("--chunk-size", type=int, default=128)
    ev.add_argument("--out", default="report.json")
    ev.add_argument("--emit-per-query", default=None)
    ev.set_defaults(func=cmd_eval, parser=ev)

    pr = sub.add_parser("pairs", help="generate verification pairs")
    pr.add_argument("--store", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--usage-cap", type=int, default=5)
    pr.add_argument("--identity-cap", type=int, default=15)
    pr.add_argument("--out", default="pairs.json")
    pr.set_defaults(func=cmd_pairs, parser=pr)

    mc = sub.add_parser("mcnemar", help="compare two per-query correctness files")
    mc.add_argument("row", help="correctness JSON for the row model")
    mc.add_argument("col", help="correctness JSON for the column model")
    mc.add_argument("--out", default=None)
    mc.set_defaults(func=cmd_mcnemar, parser=mc)

    rp = sub.add_parser("report", help="render metric reports")
    rp.add_argument("reports", nargs="+", help="MetricReport JSON files")
    rp.add_argument("--names", default=None, help="comma-separated row names")
    rp.add_argument("--out-dir", default=None, help="also write table, CSV, figures")
    rp.set_defaults(func=cmd_report, parser=rp)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PetverifyError as exc:
        sys.stderr.write(
            canonical_json({"error": exc.code, "message": str(exc)}) + "\n"
        )
        return 1
    except json.JSONDecodeError as exc:
        sys.stderr.write(
            canonical_json({"error": "io_failure", "message": f"invalid JSON: {exc}"})
            + "\n"
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
