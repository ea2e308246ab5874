"""Command-line pipeline driver.

One subcommand per pipeline stage; every artifact of a run lands under
output_dir/<config-hash-prefix>/ so equal configs share a directory and
different configs never collide. A .lock file guards each run directory
against concurrent writers. Failures print a machine-readable error
record to stderr: ConfigInvalid exits 2, missing upstream artifacts exit
3, any other runtime failure exits 1.

Heavy imports stay inside the command handlers so --help and argument
errors are instant.
"""

import argparse
import json
import os
import sys

_ECR_CHOICES = ("none", "teacher_exact", "teacher_noisy", "student")
_HEAD_CHOICES = ("attention_pool", "nv_embed_pool", "qformer",
                 "self_init_mhsa", "joint_mlp")
_COMPARE_KINDS = ("attention_pool", "nv_embed_pool", "qformer", "self_init_mhsa")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _require(path: str, what: str) -> str:
    from .errors import UpstreamArtifactMissing
    if not os.path.exists(path):
        raise UpstreamArtifactMissing(
            f"{what} not found at {path}; run the producing subcommand "
            f"with the same config first")
    return path


def _acquire_lock(out_dir: str) -> str:
    from .errors import OutputDirLocked
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputDirLocked(
            f"{out_dir} is locked by another writer; remove {path} if stale")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    return path


def _vocab(cfg):
    from .vocabulary import build_vocabulary
    return build_vocabulary(cfg["suite"]["k"])


def _fresh_backbone(cfg, vocab):
    from .model import Backbone
    return Backbone(cfg.model_config(vocab.size))


def _load_suite(out_dir: str):
    from .gridworld import load_suite
    return load_suite(_require(os.path.join(out_dir, "suite.json"), "suite"))


def _load_ckpt(out_dir: str, name: str):
    from .checkpoint import load_checkpoint
    return load_checkpoint(
        _require(os.path.join(out_dir, f"{name}.ckpt"), f"{name} checkpoint"))


def _sub_batch(cfg) -> int:
    train = cfg["train"]
    return train["global_batch"] // train["n_sub"]


# -- subcommands -------------------------------------------------------------------

def _cmd_gen_data(cfg, out_dir, args):
    from .gridworld import generate_suite, save_suite
    suite = generate_suite(**cfg.suite_kwargs())
    path = os.path.join(out_dir, "suite.json")
    save_suite(path, suite)
    return {"suite": path, "instances": len(suite)}


def _cmd_gen_ecr(cfg, out_dir, args):
    from .errors import ConfigInvalid, MalformedTrace
    from .traces import EcrRecord, build_ecr_records, save_ecr_file
    suite = _load_suite(out_dir)
    mode = cfg["ecr_source"]
    if mode == "none":
        raise ConfigInvalid(
            "gen-ecr needs --ecr-mode teacher_exact, teacher_noisy, or student")
    if mode == "student":
        from .reasoner import student_trace
        backbone, _, _ = _load_ckpt(out_dir, "reasoner")
        vocab = _vocab(cfg)
        records = []
        dropped = 0
        for inst in suite:
            try:
                trace = student_trace(backbone, vocab, inst.query,
                                      cfg["train"]["max_new_tokens"])
            except MalformedTrace:
                dropped += 1
                continue
            records.append(EcrRecord(instance_id=inst.instance_id,
                                     side="query", trace=trace))
    else:
        records = build_ecr_records(suite, mode, sides=("query",),
                                    seed=cfg["seed"])
        dropped = 0
    path = os.path.join(out_dir, "ecr.jsonl")
    save_ecr_file(path, records)
    return {"ecr": path, "mode": mode, "records": len(records),
            "malformed_dropped": dropped}


def _cmd_train_reasoner(cfg, out_dir, args):
    from .checkpoint import save_checkpoint
    from .embedder import build_trace_lookup
    from .reasoner import build_sft_dataset, exact_match_eval, train_reasoner
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    backbone = _fresh_backbone(cfg, vocab)
    train = cfg["train"]
    traces = build_trace_lookup(suite, suite.split("train"), "teacher_exact",
                                seed=cfg["seed"])
    dataset = build_sft_dataset(vocab, suite, traces,
                                max_len=cfg["model"]["max_seq_len"])
    result = train_reasoner(backbone, vocab, dataset, epochs=train["epochs"],
                            lr=train["lr_backbone"],
                            batch_size=train["global_batch"], seed=cfg["seed"])
    test = suite.split("test")
    exact = exact_match_eval(result.backbone, vocab, test,
                             max_new_tokens=train["max_new_tokens"]) if test else None
    path = os.path.join(out_dir, "reasoner.ckpt")
    save_checkpoint(path, result.backbone,
                    extra={"kind": "reasoner", "loss_curve": result.loss_curve,
                           "exact_match_test": exact})
    return {"checkpoint": path, "final_loss": result.loss_curve[-1],
            "exact_match_test": exact}


def _cmd_train_embedder(cfg, out_dir, args):
    from .checkpoint import save_checkpoint
    from .embedder import train_embedder
    from .model import lora_apply
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    backbone = _fresh_backbone(cfg, vocab)
    train = cfg["train"]
    lora_apply(backbone, r=train["lora_rank"], alpha=train["lora_alpha"])
    reasoner = None
    if cfg["ecr_source"] == "student":
        reasoner, _, _ = _load_ckpt(out_dir, "reasoner")
    run = train_embedder(backbone, vocab, suite, cfg["ecr_source"],
                         steps=train["steps"],
                         global_batch=train["global_batch"],
                         sub_batch_size=_sub_batch(cfg),
                         lr=train["lr_backbone"], tau=train["tau"],
                         seed=cfg["seed"], reasoner=reasoner)
    path = os.path.join(out_dir, "embedder.ckpt")
    save_checkpoint(path, run.backbone,
                    extra={"kind": "embedder", "ecr_source": run.ecr_source,
                           "loss_curve": run.loss_curve,
                           "eval_log": run.eval_log})
    return {"checkpoint": path, "ecr_source": run.ecr_source,
            "final_loss": run.loss_curve[-1]}


def _cmd_train_unified(cfg, out_dir, args):
    from .checkpoint import save_checkpoint
    from .errors import ConfigInvalid
    from .heads import train_two_stage
    head_config = cfg.head_config()
    if head_config is None:
        raise ConfigInvalid("train-unified requires a head "
                            "(--head KIND or a head config section)")
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    backbone = _fresh_backbone(cfg, vocab)
    train = cfg["train"]
    unified = train_two_stage(backbone, vocab, suite, head_config,
                              stage1_epochs=train["epochs"],
                              stage1_batch=train["global_batch"],
                              lr_backbone=train["lr_backbone"],
                              lr_head=train["lr_head"], steps=train["steps"],
                              global_batch=train["global_batch"],
                              sub_batch_size=_sub_batch(cfg),
                              tau=train["tau"], seed=cfg["seed"])
    path = os.path.join(out_dir, "unified.ckpt")
    save_checkpoint(path, unified.backbone, head=unified.head,
                    extra={"kind": "unified",
                           "stage1_curve": unified.stage1_curve,
                           "stage2_curve": unified.stage2_curve})
    return {"checkpoint": path, "head": head_config.kind,
            "stage1_final": unified.stage1_curve[-1],
            "stage2_final": unified.stage2_curve[-1]}


def _cmd_train_joint(cfg, out_dir, args):
    from .checkpoint import save_checkpoint
    from .heads import train_joint
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    backbone = _fresh_backbone(cfg, vocab)
    train = cfg["train"]
    run = train_joint(backbone, vocab, suite, cfg["lam"],
                      steps=train["steps"],
                      global_batch=train["global_batch"],
                      lr=train["lr_backbone"], tau=train["tau"],
                      seed=cfg["seed"])
    path = os.path.join(out_dir, "joint.ckpt")
    save_checkpoint(path, run.backbone, head=run.head,
                    extra={"kind": "joint", "lam": cfg["lam"], "log": run.log})
    return {"checkpoint": path, "lam": cfg["lam"],
            "final_total": run.log[-1]["total"]}


def _eval_reasoner_for(cfg, out_dir, name, backbone):
    """Trace generator for student-mode eval: unified and joint models decode
    their own traces; a bare embedder leans on the reasoner checkpoint."""
    if cfg["ecr_source"] != "student":
        return None
    if name in ("unified", "joint"):
        return backbone
    reasoner, _, _ = _load_ckpt(out_dir, "reasoner")
    return reasoner


def _cmd_eval(cfg, out_dir, args):
    from .checkpoint import model_hash
    from .embedder import dump_manifest, eval_embeddings, save_embedding_dump
    from .metrics import per_task_records, rank_pools
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    name = cfg["eval_checkpoint"]
    backbone, head, _ = _load_ckpt(out_dir, name)
    reasoner = _eval_reasoner_for(cfg, out_dir, name, backbone)
    embeddings = eval_embeddings(backbone, vocab, suite, cfg["ecr_source"],
                                 seed=cfg["seed"], head=head,
                                 reasoner=reasoner)
    rows = [{"id": i, "side": s, "vector": [float(x) for x in vec]}
            for (i, s), vec in sorted(embeddings.items())]
    dump_path = os.path.join(out_dir, "embeddings.jsonl")
    save_embedding_dump(dump_path, rows,
                        dump_manifest(backbone, cfg["ecr_source"],
                                      cfg["seed"], head))
    scored = rank_pools(suite, embeddings, suite.split("test"))
    records = per_task_records(scored)
    payload = {"records": records, "model_hash": model_hash(backbone, head),
               "ecr_source": cfg["ecr_source"], "seed": cfg["seed"],
               "config_hash": cfg.hash, "checkpoint": name}
    rec_path = os.path.join(out_dir, "records.json")
    with open(rec_path, "w") as fh:
        fh.write(_canonical(payload) + "\n")
    return {"records": rec_path, "embeddings": dump_path,
            "per_task": {r["task_kind"]: r["p_at_1"] for r in records}}


def _cmd_compare_heads(cfg, out_dir, args):
    from .config import _resolve_head
    from .embedder import held_out_precision
    from .heads import HeadConfig, train_two_stage
    suite = _load_suite(out_dir)
    vocab = _vocab(cfg)
    train = cfg["train"]
    results = []
    for kind in _COMPARE_KINDS:
        resolved = _resolve_head({"kind": kind}, cfg["model"])
        head_config = HeadConfig(
            kind=resolved.pop("kind"), d=resolved.pop("d"), **resolved)
        backbone = _fresh_backbone(cfg, vocab)
        unified = train_two_stage(backbone, vocab, suite, head_config,
                                  stage1_epochs=train["epochs"],
                                  stage1_batch=train["global_batch"],
                                  lr_backbone=train["lr_backbone"],
                                  lr_head=train["lr_head"],
                                  steps=train["steps"],
                                  global_batch=train["global_batch"],
                                  sub_batch_size=_sub_batch(cfg),
                                  tau=train["tau"], seed=cfg["seed"])
        reasoner = unified.backbone if cfg["ecr_source"] == "student" else None
        p1 = held_out_precision(unified.backbone, vocab, suite,
                                cfg["ecr_source"], seed=cfg["seed"],
                                head=unified.head, reasoner=reasoner)
        n_params = int(sum(t.data.size
                           for _, t in unified.head.named_parameters()))
        results.append({"head": kind, "p_at_1": p1, "head_params": n_params})
    json_path = os.path.join(out_dir, "heads_comparison.json")
    with open(json_path, "w") as fh:
        fh.write(_canonical({"results": results, "seed": cfg["seed"],
                             "config_hash": cfg.hash}) + "\n")
    txt_path = os.path.join(out_dir, "heads_comparison.txt")
    header = f"{'head':<18}{'params':>10}{'P@1':>9}"
    lines = [header, "-" * len(header)]
    lines += [f"{r['head']:<18}{r['head_params']:>10d}{r['p_at_1']:>9.4f}"
              for r in results]
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return {"comparison": json_path, "table": txt_path,
            "p_at_1": {r["head"]: r["p_at_1"] for r in results}}


def _cmd_project(cfg, out_dir, args):
    from .embedder import load_embedding_dump
    from .projection import project_2d
    dump_path = _require(os.path.join(out_dir, "embeddings.jsonl"),
                         "embedding dump")
    rows, _ = load_embedding_dump(dump_path)
    keys = sorted(rows)
    vectors = [rows[k] for k in keys]
    labels = [side for _, side in keys]
    ids = [f"{i}:{side}" for i, side in keys]
    prefix = os.path.join(out_dir, "projection")
    project_2d(vectors, labels, method=cfg["projection"],
               perplexity=cfg["perplexity"], seed=cfg["seed"], ids=ids,
               out_prefix=prefix)
    return {"coordinates": prefix + ".json", "plot": prefix + ".svg",
            "method": cfg["projection"], "points": len(keys)}


def _cmd_report(cfg, out_dir, args):
    from .report import build_report, emit_report
    rec_path = _require(os.path.join(out_dir, "records.json"),
                        "eval records")
    with open(rec_path) as fh:
        payload = json.load(fh)
    report = build_report(payload["records"], seed=payload["seed"],
                          config_hash=payload["config_hash"],
                          ecr_source=payload["ecr_source"],
                          model_hash=payload["model_hash"])
    json_path, txt_path = emit_report(report, out_dir)
    return {"report_json": json_path, "report_txt": txt_path,
            "overall_p_at_1": report.aggregates["overall"]["p_at_1"]}


_COMMANDS = (
    ("gen-data", _cmd_gen_data, "generate the synthetic task suite"),
    ("gen-ecr", _cmd_gen_ecr, "write reasoning-trace records for the suite"),
    ("train-reasoner", _cmd_train_reasoner,
     "supervised fine-tuning on oracle traces"),
    ("train-embedder", _cmd_train_embedder,
     "LoRA contrastive training (trace source set by --ecr-mode)"),
    ("train-unified", _cmd_train_unified,
     "two-stage training: reasoner SFT, then a frozen-backbone head"),
    ("train-joint", _cmd_train_joint,
     "single-model joint objective (weight set by --lambda)"),
    ("eval", _cmd_eval, "embed the suite and score retrieval pools"),
    ("compare-heads", _cmd_compare_heads,
     "train and score every head design"),
    ("project", _cmd_project, "2-D projection of the embedding dump"),
    ("report", _cmd_report, "render eval records into report files"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reasonembed",
        description="reasoning-conditioned embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in _COMMANDS:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None,
                        help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, default=None,
                        help="run seed (also reseeds model init)")
        sp.add_argument("--out", default=None, help="output directory root")
        sp.add_argument("--lambda", dest="lam", type=float, default=None,
                        help="joint-loss contrastive weight")
        sp.add_argument("--ecr-mode", dest="ecr_mode", choices=_ECR_CHOICES,
                        default=None, help="reasoning-trace source")
        sp.add_argument("--head", choices=_HEAD_CHOICES, default=None,
                        help="embedding head kind (defaults per kind)")
        sp.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted-path config override, value parsed as JSON")
        sp.set_defaults(func=fn)
    return parser


def _flag_assignments(args) -> dict:
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
        flags["model.seed"] = args.seed
    if args.out is not None:
        flags["output_dir"] = args.out
    if args.lam is not None:
        flags["lam"] = args.lam
    if args.ecr_mode is not None:
        flags["ecr_source"] = args.ecr_mode
    if args.head is not None:
        flags["head"] = {"kind": args.head}
    return flags


def _emit_error(exc) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .config import load_config
    from .errors import ConfigInvalid, ReasonembedError, UpstreamArtifactMissing
    lock = None
    try:
        cfg = load_config(args.config, overrides=tuple(args.override),
                          flags=_flag_assignments(args))
        out_dir = os.path.join(cfg["output_dir"], cfg.run_dir_name)
        os.makedirs(out_dir, exist_ok=True)
        lock = _acquire_lock(out_dir)
        try:
            summary = args.func(cfg, out_dir, args)
        finally:
            os.unlink(lock)
            lock = None
        summary = {"command": args.command, "config_hash": cfg.hash,
                   "out_dir": out_dir, **summary}
        print(json.dumps(summary, sort_keys=True))
        return 0
    except ConfigInvalid as exc:
        _emit_error(exc)
        return 2
    except UpstreamArtifactMissing as exc:
        _emit_error(exc)
        return 3
    except ReasonembedError as exc:
        _emit_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
