###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Command line entry point.

    python cli.py gen-data --ids 80 --seed 7 --out data/desk
    python cli.py train --config params-template.json --out runs/desk
    python cli.py eval --checkpoint runs/desk/checkpoints/final.ckpt --protocol local --eta 32
    python cli.py sweep eta --seeds 0 1 2
    python cli.py ablation --seeds 0 1 2
    python cli.py predict-masks --checkpoint runs/desk/checkpoints/final.ckpt

Exit codes: 0 success, 3 numeric failure, 2 any other library error, 1 an
unexpected exception (logged with its traceback).
"""
import argparse
import json
from pathlib import Path
import sys

import logbook
import numpy as np
from logbook import Logger
from tabulate import tabulate

from cada import numerics as nx
from cada.data import generate_dataset, manifest_hash
from cada.errors import CadaError, ConfigError
from cada.model import ModelConfig, build_model
from cada.result import result
from cada.textproc import CLS, ENC_ID, mask_attributes, tokenize
from main import RunExperiment, run_ablation, run_sweep
from utils import df_to_db, load_config, nest_config, parse_override, write_json

log = Logger("cli")

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# Keys left out of the echoed config: they differ between identical runs.
VOLATILE_KEYS = ("batch_runtime", "test_number", "scene_index", "db_cols")

UNEXPECTED_EXIT = 1


def collect_params(args):
    """Config file, then overrides, then the dedicated flags."""
    params = load_config(args.config) if args.config else {}
    for text in args.override or []:
        key, value = parse_override(text)
        params[key] = value
    if getattr(args, "seed", None) is not None:
        params["seed"] = args.seed
    if getattr(args, "seeds", None):
        params["seed"] = list(args.seeds)
    if getattr(args, "data", None):
        params["data_dir"] = args.data
    for flag, key in (("no_ndf", "loss.use_ndf"), ("no_atp", "loss.use_atp"), ("no_ara", "loss.use_ara")):
        if getattr(args, flag, False):
            params[key] = False
    if getattr(args, "protocol", None):
        params["eval.protocol"] = args.protocol
    if getattr(args, "eta", None) is not None:
        params["eval.eta"] = args.eta
    if getattr(args, "excel", False):
        params.update(save_result=True, save_excel=True, save_path=str(Path(args.out) / "results"))
    if getattr(args, "db", False):
        params.update(save_result=True, save_db=True)
    params["out_dir"] = args.out
    return params


def single_scene(experiment):
    scenarios, _ = experiment.scenario()
    if len(scenarios) != 1:
        raise ConfigError(f"list-valued parameters expand to {len(scenarios)} runs; use the sweep command")
    return scenarios[0]


def echo_config(out_dir, scene, extra=None):
    """Write the effective config and the run metadata next to the outputs."""
    effective = {k: v for k, v in scene.items() if k not in VOLATILE_KEYS}
    write_json(Path(out_dir) / "config.json", nest_config(effective))
    run = dict(config=effective, seed=scene.get("seed"))
    run.update(extra or {})
    write_json(Path(out_dir) / "run.json", run)


def load_trained(args, params):
    """
    Model, corpus and scene of a checkpoint. The training config stored in
    the checkpoint wins over the command line for every training key.
    """
    header, _ = nx.read_checkpoint(args.checkpoint)
    stored = header.get("meta", {}).get("config", {})
    if "seed" in params and "seed" in stored and params["seed"] != stored["seed"]:
        raise ConfigError(f"checkpoint was trained with seed {stored['seed']}, --seed gave {params['seed']}")
    if "data_dir" not in params:
        run_file = Path(args.checkpoint).parent.parent / "run.json"
        if run_file.exists():
            params["data_dir"] = json.loads(run_file.read_text(encoding="utf-8")).get("dataset_dir")
    experiment = RunExperiment(pvalue={**params, **stored})
    scene = single_scene(experiment)
    corpus = experiment.load_data(scene)
    model = build_model(ModelConfig.from_params(scene, len(corpus.vocab)), seed=scene["seed"])
    nx.load_checkpoint(
        args.checkpoint,
        model,
        expected_hash=experiment.train_hash(scene),
        expected_config=experiment.train_config(scene),
    )
    return experiment, scene, model, corpus


# Commands.
def cmd_gen_data(args):
    params = collect_params(args)
    for key, flag in (
        ("data.ids", args.ids),
        ("data.images_per_id", args.images_per_id),
        ("data.captions_per_image", args.captions_per_image),
        ("data.test_fraction", args.test_fraction),
    ):
        if flag is not None:
            params[key] = flag
    if args.seed is not None:
        params["data.seed"] = args.seed
    scene = RunExperiment(pvalue=params).params_value
    info = generate_dataset(
        scene["data.ids"],
        scene["data.images_per_id"],
        scene["data.captions_per_image"],
        scene["data.seed"],
        args.out,
        image_size=scene["model.image_size"],
        channels=scene["model.channels"],
        test_fraction=scene["data.test_fraction"],
        workers=args.workers,
    )
    rows = [
        ("identities", info.n_ids),
        ("records", info.n_records),
        ("train records", info.splits["train"]),
        ("test records", info.splits["test"]),
        ("attribute capacity", info.capacity),
        ("manifest sha256", info.manifest_sha256),
    ]
    print(tabulate(rows, headers=["item", "value"]))
    return 0


def cmd_train(args):
    params = collect_params(args)
    if args.stop_step is not None:
        params["train.stop_step"] = args.stop_step
    experiment = RunExperiment(pvalue=params)
    scene = single_scene(experiment)
    trainer, corpus = experiment.make_trainer(scene, run_dir=args.out)
    data_dir = experiment.data_dir(scene)
    echo_config(
        args.out,
        scene,
        dict(
            command="train",
            config_hash=experiment.train_hash(scene),
            dataset_dir=str(data_dir),
            dataset_sha256=manifest_hash(data_dir),
        ),
    )
    if args.resume:
        trainer.resume(args.resume)
    outcome = trainer.run()

    last = outcome.log.tail(1).to_dict("records")
    rows = [("steps", outcome.steps), ("checkpoint", str(outcome.final_checkpoint))]
    if last:
        rows += [(k, last[0][k]) for k in ("ndf", "atp", "ara", "total")]
    print(tabulate(rows, headers=["item", "value"], floatfmt=".6f"))
    return 0


def cmd_eval(args):
    params = collect_params(args)
    experiment, scene, model, corpus = load_trained(args, params)
    echo_config(
        args.out,
        scene,
        dict(
            command="eval",
            checkpoint=str(args.checkpoint),
            config_hash=experiment.train_hash(scene),
            dataset_dir=str(experiment.data_dir(scene)),
            dataset_sha256=manifest_hash(experiment.data_dir(scene)),
        ),
    )
    report = experiment.assess(scene, model, corpus, out_dir=args.out)

    if scene["save_result"]:
        scene["test_number"] = experiment.train_hash(scene)[:10]
        scene["db_cols"] = experiment.db_cols()
        agg_dict = result(scene, report, scene["test_number"])
        if scene["save_db"]:
            df_to_db(agg_dict)

    print(tabulate(sorted(report.metrics.items()), headers=["metric", "value"], floatfmt=".4f"))
    return 0


def parse_sweep_value(kind, text):
    if kind == "group":
        p, _, r = text.partition("/")
        if not r:
            raise ConfigError(f"group settings are size/stride, got {text!r}")
        return int(p), int(r)
    return json.loads(text)


def cmd_sweep(args):
    kind = args.kind.replace("-", "_")
    params = collect_params(args)
    values = [parse_sweep_value(kind, v) for v in args.values] if args.values else None
    run_sweep(kind, params, values, multi_pro=args.multi_pro, reset_database=args.reset_db)
    return 0


def cmd_ablation(args):
    run_ablation(collect_params(args), multi_pro=args.multi_pro, reset_database=args.reset_db)
    return 0


def cmd_predict_masks(args):
    params = collect_params(args)
    _, scene, model, corpus = load_trained(args, params)
    records = corpus.split("test")[: args.n]
    rng = np.random.default_rng(scene["seed"])
    rows = []
    for record in records:
        tokens = tokenize(
            record.caption, corpus.vocab, scene["model.max_len"], leading=CLS, lexicon=corpus.lexicon
        ).with_leading(ENC_ID)
        masked = mask_attributes(tokens, tokens.attribute_spans, 1.0, rng)
        predictions = model.predict_masked(record.image[None], masked.ids, tokens.pad_mask, top_k=3)[0]
        for (position, top), label in zip(predictions, masked.labels):
            rows.append(
                (
                    record.caption,
                    position,
                    corpus.vocab.decode(int(label)),
                    ", ".join(f"{corpus.vocab.decode(t)} {p:.2f}" for t, p in top),
                )
            )
    print(tabulate(rows, headers=["caption", "position", "truth", "top-3"]))
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections flattened to dotted keys)")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--log-level", default="INFO", choices=LOG_LEVELS)

    parser = argparse.ArgumentParser(prog="cada", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--ids", type=int)
    p.add_argument("--images-per-id", type=int)
    p.add_argument("--captions-per-image", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    def ablation_flags(p):
        p.add_argument("--no-ndf", action="store_true")
        p.add_argument("--no-atp", action="store_true")
        p.add_argument("--no-ara", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory (generated when absent)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-step", type=int)
    ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="must match the seed the checkpoint was trained with")
    p.add_argument("--data")
    p.add_argument("--protocol", choices=("global", "local"))
    p.add_argument("--eta", type=int)
    p.add_argument("--excel", action="store_true", help="also write an Excel workbook")
    p.add_argument("--db", action="store_true", help="append the results to data/results.db")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="train and evaluate over one setting")
    p.add_argument("kind", choices=("eta", "mask-rate", "group"))
    p.add_argument("--values", nargs="+", help="settings (group settings as size/stride)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--data")
    p.add_argument("--multi-pro", action="store_true")
    p.add_argument("--reset-db", action="store_true", help="offer to clear data/results.db first")
    ablation_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", parents=[common], help="train the ablation ladder")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--data")
    p.add_argument("--multi-pro", action="store_true")
    p.add_argument("--reset-db", action="store_true", help="offer to clear data/results.db first")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("predict-masks", parents=[common], help="top-3 guesses for masked attributes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n", type=int, default=5, help="number of test captions")
    p.set_defaults(func=cmd_predict_masks)

    return parser


def log_setup(out_dir, level):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return logbook.NestedSetup(
        [
            logbook.NullHandler(),
            logbook.StderrHandler(level=level, bubble=True),
            logbook.FileHandler(str(out_dir / "run.log"), level="DEBUG", bubble=True),
        ]
    )


def main(argv=None):
    args = build_parser().parse_args(argv)
    with log_setup(args.out, args.log_level).applicationbound():
        try:
            return args.func(args)
        except CadaError as e:
            log.error(f"{type(e).__name__}: {e}")
            return e.exit_code
        except Exception:
            log.exception("unexpected error")
            return UNEXPECTED_EXIT


if __name__ == "__main__":
    sys.exit(main())
