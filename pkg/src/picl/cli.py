"""Command-line surface tying the engine into reproducible experiments.

Every subcommand resolves its settings from an optional --config JSON file
plus flag overrides (flags win), embeds the resolved configuration and its
hash in every artifact it writes, and derives all component seeds from the one
global --seed. Outputs are plain JSON/CSV with deterministic formatting, so
identical invocations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .bridge import BridgeClient
from .core import DecodeConfig, derive_seed
from .decoding import Method, MethodSpec, lambda_range
from .evaluation import (
    EvalReport,
    ScorerSet,
    UniformLM,
    evaluate_captions,
    evaluate_method,
    report_csv,
    sweep_csv,
    tradeoff_sweep,
    train_bigram_lm,
)
from .listeners import ToySimilarity, make_eval_listener
from .manifest import ProblemManifest, load_manifest, manifest_from_world, manifest_to_json
from .speakers import ToyLexiconSpeaker, generate_toy_world, load_world, world_to_json
from .tuning import (
    SearchSpec,
    mid_ppl_target,
    select_lambda_informativity,
    select_lambda_ppl_matched,
)

# every settable key, used to reject unknown config-file entries
CONFIG_KEYS = frozenset({
    "seed", "method", "methods", "lambda", "beam_width", "pool_size", "max_len",
    "eps", "p_stop", "tau", "lm_k", "perturb_scale", "eval_seed", "jobs",
    "world", "manifest", "bridge", "top_k", "timeout", "out", "trace",
    "objective", "target_ppl", "steps", "exhaustive_fine", "grid",
    "n_sets", "n_attributes", "overlap_min", "n_fillers", "val_fraction",
    "manifest_prefix", "captions",
})

DEFAULTS = {
    "seed": 0, "method": "picl", "lambda": 0.0, "beam_width": 16, "pool_size": 256,
    "max_len": 16, "eps": 0.15, "p_stop": 0.3, "tau": 1.0, "lm_k": 0.5,
    "perturb_scale": 0.3, "eval_seed": None, "jobs": 1, "world": None,
    "manifest": None, "bridge": None, "top_k": None, "timeout": 30.0,
    "out": None, "trace": False, "objective": "informativity", "target_ppl": None,
    "steps": "0.1,0.01,0.001", "exhaustive_fine": False, "grid": "0:1:0.1",
    "methods": "picl,es,incre-rsa", "n_sets": 100, "n_attributes": 10,
    "overlap_min": 3, "n_fillers": 4, "val_fraction": 0.5,
    "manifest_prefix": None, "captions": None,
}


class Run:
    """Resolved settings for one subcommand invocation."""

    def __init__(self, command: str, ns: argparse.Namespace):
        self.command = command
        file_cfg = {}
        if getattr(ns, "config", None):
            file_cfg = json.loads(Path(ns.config).read_text())
            unknown = set(file_cfg) - CONFIG_KEYS
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.settings: dict = {}
        for key, default in DEFAULTS.items():
            flag = getattr(ns, key.replace("lambda", "lam") if key == "lambda" else key, None)
            if flag is not None:
                self.settings[key] = flag
            elif key in file_cfg:
                self.settings[key] = file_cfg[key]
            else:
                self.settings[key] = default
        self._client: BridgeClient | None = None

    def __getitem__(self, key: str):
        return self.settings[key]

    # -- provenance -----------------------------------------------------------

    def provenance(self) -> dict:
        resolved = {"command": self.command}
        resolved.update({k: v for k, v in sorted(self.settings.items())})
        blob = json.dumps(resolved, sort_keys=True)
        return {
            "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
            "seed": self.settings["seed"],
            "config": resolved,
        }

    def csv_comment(self) -> str:
        prov = self.provenance()
        return f"config_hash={prov['config_hash']} seed={prov['seed']}"

    # -- resolution -------------------------------------------------------------

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            lam=float(self["lambda"]),
            beam_width=int(self["beam_width"]),
            pool_size=int(self["pool_size"]),
            max_len=int(self["max_len"]),
            seed=int(self["seed"]),
        )

    def manifest(self) -> ProblemManifest:
        if not self["manifest"]:
            raise ValueError("a --manifest file is required")
        manifest = load_manifest(self["manifest"])
        if manifest.bridge_resolved and not self["bridge"]:
            raise ValueError(
                "manifest items are bridge-resolved but no --bridge endpoint is configured"
            )
        return manifest

    def scorers(self, manifest: ProblemManifest) -> ScorerSet:
        if self["bridge"]:
            client = BridgeClient.connect(
                self["bridge"], timeout=float(self["timeout"]),
            )
            self._client = client
            speaker = client.speaker(top_k=self["top_k"])
            sim = client.similarity(tau=float(self["tau"]))
            lm = (client.lm() if "lm_score" in client.capabilities
                  else UniformLM(speaker.vocab.size))
            # no held-out toy listener over a bridge: evaluate with the same scorer
            return ScorerSet(speaker=speaker, decode_sim=sim, eval_sim=sim, lm=lm)
        world_path = self["world"] or manifest.item_source.get("path")
        if not world_path:
            raise ValueError("need --world (or a manifest pointing at one) or --bridge")
        world = load_world(world_path)
        speaker = ToyLexiconSpeaker(world, eps=float(self["eps"]), p_stop=float(self["p_stop"]))
        eval_seed = self["eval_seed"]
        if eval_seed is None:
            eval_seed = derive_seed(int(self["seed"]), "eval-listener")
        lm = train_bigram_lm(
            manifest.reference_captions(world.vocabulary),
            k=float(self["lm_k"]),
            vocab_size=world.vocabulary.size,
        )
        return ScorerSet(
            speaker=speaker,
            decode_sim=ToySimilarity(world, tau=float(self["tau"])),
            eval_sim=make_eval_listener(
                world, float(self["perturb_scale"]), int(eval_seed), tau=float(self["tau"]),
            ),
            lm=lm,
        )

    def close(self):
        if self._client is not None:
            self._client.close()

    def search_spec(self, method: Method) -> SearchSpec:
        steps = tuple(float(s) for s in str(self["steps"]).split(","))
        lo, hi = lambda_range(method)
        return SearchSpec(lo, hi, steps)


def _write_json(path: str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _methods(text: str) -> list[Method]:
    return [Method(m.strip()) for m in str(text).split(",") if m.strip()]


def _grid(text: str) -> list[float]:
    from .tuning import grid_points

    text = str(text)
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        return grid_points(lo, hi, step)
    return [float(x) for x in text.split(",")]


# -- subcommands ----------------------------------------------------------------


def cmd_gen_world(ns) -> int:
    run = Run("gen-world", ns)
    world = generate_toy_world(
        n_sets=int(run["n_sets"]),
        n_attributes=int(run["n_attributes"]),
        overlap_min=int(run["overlap_min"]),
        seed=int(run["seed"]),
        n_fillers=int(run["n_fillers"]),
    )
    out = run["out"] or "world.json"
    payload = world_to_json(world)
    payload["provenance"] = run.provenance()
    _write_json(out, payload)
    written = [out]
    if run["manifest_prefix"]:
        n_val = round(len(world.problem_sets) * float(run["val_fraction"]))
        splits = {
            "validation": range(n_val),
            "test": range(n_val, len(world.problem_sets)),
        }
        for split, indices in splits.items():
            manifest = manifest_from_world(world, indices, split, out)
            path = f"{run['manifest_prefix']}.{split}.json"
            payload = manifest_to_json(manifest)
            payload["provenance"] = run.provenance()
            _write_json(path, payload)
            written.append(path)
    print(json.dumps({"written": written}))
    return 0


def _decode_all(run: Run, manifest: ProblemManifest, scorers: ScorerSet,
                spec: MethodSpec, trace: bool = False):
    from .evaluation import decode_problems

    contexts = manifest.contexts()
    results = decode_problems(
        spec, contexts, scorers, run.decode_config(),
        jobs=int(run["jobs"]), trace=trace,
    )
    return contexts, results


def cmd_decode(ns) -> int:
    run = Run("decode", ns)
    manifest = run.manifest()
    scorers = run.scorers(manifest)
    try:
        spec = MethodSpec(Method(run["method"]), float(run["lambda"]))
        trace = bool(run["trace"])
        contexts, results = _decode_all(run, manifest, scorers, spec, trace=trace)
        vocab = scorers.vocab
        out = run["out"] or "captions.json"
        payload = {
            "format": "captions/v1",
            "method": spec.method.value,
            "lambda": spec.lam,
            "provenance": run.provenance(),
            "captions": [
                {
                    "set_id": sid,
                    "target": ctx.target,
                    "words": [vocab.words[t] for t in r.caption.tokens if t != vocab.eos_id],
                    "text": vocab.text(r.caption.tokens),
                    "combined_score": r.combined_score,
                    "speaker_logp": r.speaker_logp,
                }
                for sid, ctx, r in zip(manifest.set_ids(), contexts, results)
            ],
        }
        _write_json(out, payload)
        if trace:
            trace_path = f"{out}.trace.jsonl"
            with open(trace_path, "w") as fh:
                for sid, r in zip(manifest.set_ids(), results):
                    for step in r.trace or ():
                        fh.write(json.dumps({"set_id": sid, **step}, sort_keys=True) + "\n")
        print(json.dumps({"written": [out]}))
        return 0
    finally:
        run.close()


def cmd_eval(ns) -> int:
    run = Run("eval", ns)
    manifest = run.manifest()
    scorers = run.scorers(manifest)
    try:
        contexts = manifest.contexts()
        if run["captions"]:
            data = json.loads(Path(run["captions"]).read_text())
            if data.get("format") != "captions/v1":
                raise ValueError(f"{run['captions']}: not a captions/v1 file")
            by_set = {c["set_id"]: c for c in data["captions"]}
            missing = [s for s in manifest.set_ids() if s not in by_set]
            if missing:
                raise ValueError(f"captions file lacks sets: {missing}")
            vocab = scorers.vocab
            captions = [vocab.caption(by_set[s]["words"]) for s in manifest.set_ids()]
            report = evaluate_captions(
                scorers, contexts, captions,
                method=data.get("method", "unknown"),
                lam=float(data.get("lambda", 0.0)),
                set_ids=manifest.set_ids(),
            )
        else:
            spec = MethodSpec(Method(run["method"]), float(run["lambda"]))
            report = evaluate_method(
                spec, contexts, scorers, run.decode_config(),
                set_ids=manifest.set_ids(), jobs=int(run["jobs"]),
            )
        out = run["out"] or "report"
        csv_path, json_path = f"{out}.csv", f"{out}.json"
        Path(csv_path).write_text(report_csv(report, comment=run.csv_comment()))
        _write_json(json_path, _report_json(report, run))
        print(json.dumps({"written": [csv_path, json_path],
                          "accuracy": report.retrieval_accuracy,
                          "mean_ppl": report.mean_perplexity}))
        return 0
    finally:
        run.close()


def _report_json(report: EvalReport, run: Run) -> dict:
    return {
        "format": "eval-report/v1",
        "provenance": run.provenance(),
        "method": report.method,
        "lambda": report.lam,
        "retrieval_accuracy": report.retrieval_accuracy,
        "mean_perplexity": report.mean_perplexity,
        "problems": [
            {
                "set_id": p.set_id,
                "target": p.target,
                "chosen": p.chosen,
                "target_rank": p.target_rank,
                "correct": p.correct,
                "caption": p.caption,
                "perplexity": p.perplexity,
            }
            for p in report.problems
        ],
    }


def cmd_sweep(ns) -> int:
    run = Run("sweep", ns)
    manifest = run.manifest()
    scorers = run.scorers(manifest)
    try:
        rows = tradeoff_sweep(
            _methods(run["methods"]), _grid(run["grid"]), manifest.contexts(),
            scorers, run.decode_config(), jobs=int(run["jobs"]),
        )
        out = run["out"] or "sweep.csv"
        Path(out).write_text(sweep_csv(rows, comment=run.csv_comment()))
        json_path = f"{out}.json" if not out.endswith(".csv") else out[:-4] + ".json"
        _write_json(json_path, {
            "format": "sweep/v1",
            "provenance": run.provenance(),
            "rows": [
                {"method": r.method, "lambda": r.lam, "accuracy": r.accuracy,
                 "mean_ppl": r.mean_ppl, "error": r.error}
                for r in rows
            ],
        })
        print(json.dumps({"written": [out, json_path]}))
        return 0
    finally:
        run.close()


def cmd_tune(ns) -> int:
    run = Run("tune", ns)
    manifest = run.manifest()
    if manifest.split == "test":
        raise ValueError("tuning must not read the test split")
    scorers = run.scorers(manifest)
    try:
        method = Method(run["method"])
        contexts = manifest.contexts()
        cfg = run.decode_config()
        spec = run.search_spec(method)
        jobs = int(run["jobs"])
        exhaustive = bool(run["exhaustive_fine"])
        objective = str(run["objective"])
        extra: dict = {}
        if objective == "informativity":
            result = select_lambda_informativity(
                method, contexts, scorers, cfg, spec=spec,
                exhaustive_fine=exhaustive, jobs=jobs,
            )
        elif objective == "ppl-matched":
            if run["target_ppl"] is None:
                raise ValueError("ppl-matched tuning needs --target-ppl")
            result = select_lambda_ppl_matched(
                method, contexts, scorers, cfg, float(run["target_ppl"]),
                spec=spec, exhaustive_fine=exhaustive, jobs=jobs,
            )
        elif objective == "mid-ppl":
            picl_tuning = select_lambda_informativity(
                Method.PICL, contexts, scorers, cfg,
                spec=run.search_spec(Method.PICL),
                exhaustive_fine=exhaustive, jobs=jobs,
            )
            picl_ppl = evaluate_method(
                MethodSpec(Method.PICL, picl_tuning.lambda_star), contexts, scorers,
                cfg, jobs=jobs,
            ).mean_perplexity
            base_ppl = evaluate_method(
                MethodSpec(Method.BASE), contexts, scorers, cfg, jobs=jobs,
            ).mean_perplexity
            target = mid_ppl_target(base_ppl, picl_ppl)
            extra = {
                "picl_lambda": picl_tuning.lambda_star,
                "picl_mean_ppl": picl_ppl,
                "base_mean_ppl": base_ppl,
                "target_ppl": target,
            }
            result = select_lambda_ppl_matched(
                method, contexts, scorers, cfg, target,
                spec=spec, exhaustive_fine=exhaustive, jobs=jobs,
            )
        else:
            raise ValueError(f"unknown tuning objective: {objective}")
        out = run["out"] or "tuning.json"
        payload = {"format": "tuning/v1", "provenance": run.provenance()}
        payload.update(result.to_json())
        payload.update(extra)
        _write_json(out, payload)
        print(json.dumps({"written": [out], "chosen": result.lambda_star}))
        return 0
    finally:
        run.close()


def cmd_ablate(ns) -> int:
    run = Run("ablate", ns)
    manifest = run.manifest()
    scorers = run.scorers(manifest)
    try:
        lam = float(run["lambda"])
        contexts = manifest.contexts()
        cfg = run.decode_config()
        accuracies = {}
        for method in (Method.PICL, Method.PICL_FULL_RERANK, Method.PICL_NO_DISTRACTORS):
            report = evaluate_method(
                MethodSpec(method, lam), contexts, scorers, cfg,
                set_ids=manifest.set_ids(), jobs=int(run["jobs"]),
            )
            accuracies[method.value] = report.retrieval_accuracy
        ordering = {
            "picl_gt_full_rerank":
                accuracies["picl"] > accuracies["picl-full-rerank"],
            "full_rerank_gt_no_distractors":
                accuracies["picl-full-rerank"] > accuracies["picl-no-distractors"],
        }
        out = run["out"] or "ablation.json"
        _write_json(out, {
            "format": "ablation/v1",
            "provenance": run.provenance(),
            "lambda": lam,
            "accuracies": accuracies,
            "ordering": ordering,
            "ordering_reproduced": all(ordering.values()),
        })
        print(json.dumps({"written": [out], "accuracies": accuracies}))
        return 0
    finally:
        run.close()


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="picl",
        description="pragmatic discriminative captioning: decode, evaluate, tune",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, decode=False, scorer=False):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if scorer:
            p.add_argument("--manifest")
            p.add_argument("--world")
            p.add_argument("--bridge", help="scorer endpoint: host:port or a command line")
            p.add_argument("--eps", type=float)
            p.add_argument("--p-stop", dest="p_stop", type=float)
            p.add_argument("--tau", type=float)
            p.add_argument("--lm-k", dest="lm_k", type=float)
            p.add_argument("--perturb-scale", dest="perturb_scale", type=float)
            p.add_argument("--eval-seed", dest="eval_seed", type=int)
            p.add_argument("--top-k", dest="top_k", type=int)
            p.add_argument("--timeout", type=float)
            p.add_argument("--jobs", type=int)
        if decode:
            p.add_argument("--method", choices=[m.value for m in Method])
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--beam-width", dest="beam_width", type=int)
            p.add_argument("--pool-size", dest="pool_size", type=int)
            p.add_argument("--max-len", dest="max_len", type=int)

    p = sub.add_parser("gen-world", help="write a seeded toy world and split manifests")
    common(p)
    p.add_argument("--n-sets", dest="n_sets", type=int)
    p.add_argument("--n-attributes", dest="n_attributes", type=int)
    p.add_argument("--overlap-min", dest="overlap_min", type=int)
    p.add_argument("--n-fillers", dest="n_fillers", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--manifest-prefix", dest="manifest_prefix")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("decode", help="generate captions for every manifest problem")
    common(p, decode=True, scorer=True)
    p.add_argument("--trace", action="store_const", const=True, default=None,
                   help="write per-step pool records next to the captions file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="retrieval accuracy and perplexity report")
    common(p, decode=True, scorer=True)
    p.add_argument("--captions", help="score an existing captions file instead of decoding")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy/perplexity tradeoff over a lambda grid")
    common(p, decode=True, scorer=True)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--grid", help="lo:hi:step or comma-separated lambdas")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tune", help="select the informativity weight on a validation manifest")
    common(p, decode=True, scorer=True)
    p.add_argument("--objective", choices=["informativity", "ppl-matched", "mid-ppl"])
    p.add_argument("--target-ppl", dest="target_ppl", type=float)
    p.add_argument("--steps", help="comma-separated coarse-to-fine step sizes")
    p.add_argument("--exhaustive-fine", dest="exhaustive_fine",
                   action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("ablate", help="compare picl against its two ablations")
    common(p, decode=True, scorer=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except Exception as exc:  # surfaced as machine-readable JSON, nonzero exit
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
