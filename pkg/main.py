###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
import collections
from datetime import datetime
import itertools
import multiprocessing
from pathlib import Path
import time
import uuid

import pandas as pd
from logbook import Logger
from tabulate import tabulate

from cada.data import generate_dataset, load_corpus
from cada.errors import ConfigError
from cada.model import ModelConfig, build_model, verify_sharing
from cada.result import result, write_eval_report, write_sweep
from cada.retrieval import evaluate
from cada.trainer import TrainConfig, Trainer
from utils import check_keys, clear_database, config_hash, df_to_db, yes_or_no

log = Logger("main")

METRIC_COLS = ["rank1", "rank5", "rank10", "map", "decoder_calls", "mam_accuracy"]

# Keys whose values change the trained weights.
TRAIN_PREFIXES = ("seed", "data.", "model.", "train.", "loss.")

# Run control under the train prefix; a partial run resumes into the full one.
TRAIN_CONTROL = ("train.stop_step", "train.checkpoint_every", "train.prefetch")

# Keys that change the generated dataset.
DATA_KEYS = (
    "data.seed",
    "data.ids",
    "data.images_per_id",
    "data.captions_per_image",
    "data.test_fraction",
    "model.image_size",
    "model.channels",
)

# (label, overrides, protocols). Forward-KL baseline first, then NDF with
# the association objectives added one at a time.
ABLATION_LADDER = (
    ("Baseline", {"loss.ndf_mode": "forward_kl", "loss.use_atp": False, "loss.use_ara": False}, ("global",)),
    ("+NDF", {"loss.use_atp": False, "loss.use_ara": False}, ("global",)),
    ("+NDF+ARA", {"loss.use_atp": False}, ("global",)),
    ("+NDF+ATP", {"loss.use_ara": False}, ("global", "local")),
    ("+NDF+ARA+ATP", {}, ("global", "local")),
)

SWEEP_KINDS = dict(
    eta=("eval.eta", (0, 4, 8, 16, 32, 64)),
    mask_rate=("data.alpha", (0.2, 0.4, 0.6, 0.8, 1.0)),
    group=("group", ((36, 36), (36, 18), (24, 24), (48, 24), (72, 72))),
)


def scaled_groups(settings, max_len, reference=72):
    """Rescale (group size, stride) pairs given for 72 text rows to ``max_len`` rows."""
    scaled = []
    for p, r in settings:
        pair = (max(1, round(p * max_len / reference)), max(1, round(r * max_len / reference)))
        if pair not in scaled:
            scaled.append(pair)
    return scaled


class RunExperiment:
    """
    Manages the execution of training and retrieval experiments.

    - Manages parameters.
    - Creates all possible scenarios from the loaded lists.
    - Executes single or multiple experiments.
    - Manages multi-processing.
    - Generates or loads the dataset, trains or reloads the model, evaluates.

    params:
      - ``pvalue`` (dict: default None)
          Values overriding the defaults in the first position of the params
          table. A list value makes the key a scenario dimension.

      - ``dimension`` (dict: default None)
          Overrides of the dimension flag in the second position. Dimension
          keys are the experiment-defining ones: they go to the database
          columns and the sweep tables.

      - ``print_params`` (bool: default ``False``)
          Print the parameters to the terminal at the beginning of the run.

      - ``run_test_now`` (bool: default ``True``)
          Execute the experiments; if not, just print the parameters.

      - ``multi_pro`` (bool: default ``False``)
          Run the scenarios on a process pool.

      - ``reset_database`` (bool: default ``False``)
          If using a database, clear the database.

      - ``linked`` (dict: default None)
          Keys that vary together: ``(key, ...) -> [(value, ...), ...]``.
          Each tuple is one scenario setting instead of a product axis.

    Following are the run control values of the params table:
      - ``batchname`` (str: default ``None``)
          Custom batch name for identifying the experiment in results.

      - ``save_result``, ``save_excel``, ``save_db``, ``full_export``
          Export switches, as for ``cada.result.result``. ``full_export`` adds
          the per-query and per-step tables to the database.

      - ``out_dir`` (str: default ``runs``)
          Root of trained models, datasets and evaluation reports.

      - ``data_dir`` (str: default ``None``)
          Existing dataset directory. When ``None`` the dataset is generated
          under ``out_dir/data/<hash>`` from the ``data.*`` keys.

      - ``retrain`` (bool: default ``False``)
          Ignore a final checkpoint already present for the same training
          config.

    The ``seed``, ``data.*``, ``model.*``, ``train.*`` and ``loss.*`` keys
    define the trained model (their hash names its directory); ``eval.*``
    keys only change the evaluation.
    """

    def __init__(
        self,
        pvalue=None,
        dimension=None,
        print_params=False,
        run_test_now=True,
        multi_pro=False,
        reset_database=False,
        linked=None,
    ):
        self.print_params = print_params
        self.run_test_now = run_test_now
        self.multi_pro = multi_pro
        self.reset_database = reset_database
        self.linked = {tuple(k): [tuple(v) for v in values] for k, values in (linked or {}).items()}

        self.params = {
            "batchname": ["None", True],
            "batch_runtime": [datetime.now().strftime("%Y-%m-%d %H:%M"), False],
            "test_number": [0, False],
            "save_result": [False, False],
            "save_excel": [False, False],
            "save_db": [False, False],
            "full_export": [False, False],
            "save_path": ["results", False],
            "save_name": ["results", False],
            "out_dir": ["runs", False],
            "data_dir": [None, False],
            "retrain": [False, False],
            "workers": [1, False],
            "printon": [True, False],
            "print_final_output": [False, False],
            "seed": [0, True],
            "data.seed": [7, True],
            "data.ids": [80, True],
            "data.images_per_id": [4, True],
            "data.captions_per_image": [2, True],
            "data.test_fraction": [0.2, True],
            "data.alpha": [0.8, True],
            "data.mask_mode": ["attribute", True],
            "data.augment": [True, True],
            "model.image_size": [32, True],
            "model.channels": [3, True],
            "model.patch_size": [8, True],
            "model.image_layers": [2, True],
            "model.image_width": [64, True],
            "model.image_heads": [4, True],
            "model.text_layers": [2, True],
            "model.text_width": [64, True],
            "model.text_heads": [4, True],
            "model.max_len": [24, True],
            "model.latent_dim": [32, True],
            "model.mlp_ratio": [4, True],
            "train.epochs": [30, True],
            "train.batch_size": [16, True],
            "train.lr": [3e-4, True],
            "train.weight_decay": [0.05, True],
            "train.warmup_steps": [0, True],
            "train.min_lr_ratio": [0.01, True],
            "train.accum_steps": [1, True],
            "train.stop_step": [0, False],
            "train.checkpoint_every": [0, False],
            "train.prefetch": [False, False],
            "loss.use_ndf": [True, True],
            "loss.use_atp": [True, True],
            "loss.use_ara": [True, True],
            "loss.ndf_mode": ["ndf", True],
            "loss.tau": [0.02, True],
            "loss.lambda": [0.1, True],
            "loss.eps": [1e-8, True],
            "loss.group_size": [12, True],
            "loss.group_stride": [12, True],
            "eval.protocol": ["global", True],
            "eval.eta": [32, True],
            "eval.mam": [True, False],
            "eval.workers": [1, False],
        }

        # Create and modify the parameters values dictionary
        self.params_value = {p: v[0] for p, v in self.params.items()}
        if pvalue:
            check_keys(pvalue, list(self.params))
            self.params_value.update(pvalue)

        # Create and modify the parameters dimension dictionary.
        self.params_dimension = {p: v[1] for p, v in self.params.items()}
        if dimension:
            check_keys(dimension, list(self.params))
            self.params_dimension.update(dimension)
        for keys in self.linked:
            check_keys(dict.fromkeys(keys), list(self.params))

        self._corpora = {}
        self._models = {}

    def db_cols(self):
        return [d for d, v in self.params_dimension.items() if v]

    def train_keys(self):
        return [k for k in self.params if k.startswith(TRAIN_PREFIXES) and k not in TRAIN_CONTROL]

    def train_hash(self, scene):
        return config_hash(scene, self.train_keys())

    def train_config(self, scene):
        return {k: scene[k] for k in self.train_keys()}

    def data_dir(self, scene):
        if scene["data_dir"]:
            return Path(scene["data_dir"])
        return Path(scene["out_dir"]) / "data" / config_hash(scene, DATA_KEYS)[:10]

    def model_dir(self, scene):
        return Path(scene["out_dir"]) / "models" / self.train_hash(scene)[:10]

    def run_experiment(self):
        """Function for controlling the running of the experiments."""

        # Call a reset function from utilities.
        if self.reset_database and yes_or_no("Do you wish to reset the database?"):
            clear_database()

        start_time = time.time()

        # Combinations of all the possible scenarios.
        scenarios, test_params = self.scenario()
        total_tests = len(scenarios)

        # Print parameters
        if self.print_params:
            print(tabulate(sorted(test_params.items(), key=lambda kv: str(kv[0])), headers=["parameter", "value"]))
            print("\n")

        if not self.run_test_now:
            return []

        if self.multi_pro:
            rows = []
            start_test = time.time()
            processes = max(min(multiprocessing.cpu_count() - 2, total_tests), 1)
            with multiprocessing.Pool(processes=processes) as pool:
                # One scene per training config trains first, so the
                # evaluation scenes below only reload checkpoints.
                firsts = {self.train_hash(s): s for s in reversed(scenarios)}
                pool.map(self.fit_only, list(firsts.values()))

                # This loop allows for processing to database test results
                # while further tests are still running. Saves memory.
                for cum_test, (row, agg_dict) in enumerate(
                    pool.imap_unordered(self.experiment_controller_multi, scenarios), start=1
                ):
                    rows.append(row)
                    if self.params_value["save_result"] and self.params_value["save_db"] and agg_dict:
                        df_to_db(agg_dict)
                    log.info(
                        f"Experiments: {cum_test:3.0f} / {total_tests:3.0f} "
                        f"-- Elapsed: {(time.time() - start_test):.2f}"
                    )
            rows.sort(key=lambda r: r["scene_index"])
        else:
            # Single call to run sequentially, no multi-processing.
            rows = self.experiment_controller(scenarios)

        log.info(f"Elapsed time of {(time.time() - start_time):.2f}")
        return rows

    def experiment_controller(self, scenarios):
        """
        Runs the scenes sequentially one at a time. No multi processing.
        :param scenarios list: Individual experiment ``scenes``.
        :return rows list: One dict of dimensions and metrics per scene.
        """
        rows = []
        for loop, scene in enumerate(scenarios, start=1):
            if scene["printon"]:
                log.info(f"Starting loop {loop} of {len(scenarios)}")
            row, agg_dict = self.experiment_controller_multi(scene)
            if scene["save_result"] and scene["save_db"] and agg_dict:
                df_to_db(agg_dict)
            rows.append(row)
        return rows

    def experiment_controller_multi(self, scene=None):
        """
        Runs a single scene.
        :param scene dict: One set of experiment parameters.
        :return row, agg_dict: Metrics row and the results bound for the database.
        """
        # Assign uniq id for the run to allow matching in database.
        scene["test_number"] = str(uuid.uuid4()).replace("-", "")[:10]

        report, train_log = self.run_scene(scene)

        agg_dict = {}
        if scene["save_result"] and (scene["save_excel"] or scene["save_db"]):
            scene["db_cols"] = self.db_cols()
            agg_dict = result(scene, report, scene["test_number"], train_log)

        row = {k: scene[k] for k in self.db_cols() if k in scene}
        row.update(scene_index=scene["scene_index"], train_hash=self.train_hash(scene)[:10])
        row.update({k: report.metrics[k] for k in METRIC_COLS if k in report.metrics})
        return row, agg_dict

    def iterize(self, iterable):
        """
        Handy function which turns things into things that can be iterated upon
        including iterables
        """
        niterable = list()
        for elem in iterable:
            if isinstance(elem, str):
                elem = (elem,)
            elif not isinstance(elem, collections.abc.Iterable):
                elem = (elem,)

            niterable.append(elem)

        return niterable

    def scenario(self):
        """
        Create list of all possible kwargs for running multiple experiments.

        Also returns the parameters with the individual inputs to create the
        scenarios, for printing the setup to the terminal.

        :returns scenarios, test_params:
        """
        test_params = self.params_value.copy()
        for linked_keys, settings in self.linked.items():
            for k in linked_keys:
                test_params.pop(k)
            test_params[linked_keys] = settings

        keys = list(test_params.keys())
        values = [
            test_params[k] if isinstance(k, tuple) else elem for k, elem in zip(keys, self.iterize(test_params.values()))
        ]

        scenario_dict = []
        for combination in itertools.product(*values):
            scene = {}
            for k, v in zip(keys, combination):
                scene.update(zip(k, v) if isinstance(k, tuple) else [(k, v)])
            scenario_dict.append(scene)

        scenario_dict_final = list()
        seen = set()
        for scene in scenario_dict:
            if scene["loss.group_size"] > scene["model.max_len"]:
                log.info(f"skipping group size {scene['loss.group_size']}: longer than model.max_len")
                continue

            # Global matching ignores eta; reranking nothing is global matching.
            if scene["eval.protocol"] == "global":
                scene["eval.eta"] = 0
            elif scene["eval.eta"] == 0:
                scene["eval.protocol"] = "global"

            n_test = round(scene["data.ids"] * scene["data.test_fraction"])
            if scene["eval.eta"] > n_test * scene["data.images_per_id"]:
                log.info(f"skipping eta {scene['eval.eta']}: larger than the test gallery")
                continue

            signature = tuple(sorted((k, str(v)) for k, v in scene.items()))
            if signature in seen:
                continue
            seen.add(signature)
            scene["scene_index"] = len(scenario_dict_final)
            scenario_dict_final.append(scene)

        if not scenario_dict_final:
            raise ConfigError(
                "every parameter combination violates a constraint "
                "(loss.group_size <= model.max_len, eval.eta <= test gallery size)"
            )
        if scenario_dict_final[0]["printon"]:
            log.info(f"There will be {len(scenario_dict_final)} experiments run.")

        return scenario_dict_final, test_params

    # Data and models.
    def load_data(self, scene):
        """Load the scene's dataset, generating it first when missing."""
        out = self.data_dir(scene)
        if out not in self._corpora:
            if not (out / "manifest.jsonl").exists():
                if scene["data_dir"]:
                    log.warning(f"no manifest in {out}, generating the dataset there")
                generate_dataset(
                    scene["data.ids"],
                    scene["data.images_per_id"],
                    scene["data.captions_per_image"],
                    scene["data.seed"],
                    out,
                    image_size=scene["model.image_size"],
                    channels=scene["model.channels"],
                    test_fraction=scene["data.test_fraction"],
                    workers=scene["workers"],
                )
            self._corpora[out] = load_corpus(out)
        return self._corpora[out]

    def make_trainer(self, scene, run_dir=None):
        corpus = self.load_data(scene)
        model = build_model(ModelConfig.from_params(scene, len(corpus.vocab)), seed=scene["seed"])
        verify_sharing(model, raise_on_failure=True)
        trainer = Trainer(
            model,
            corpus.split("train"),
            corpus.vocab,
            corpus.lexicon,
            TrainConfig.from_params(scene),
            run_dir or self.model_dir(scene),
            config_hash=self.train_hash(scene),
            config_dict=self.train_config(scene),
        )
        return trainer, corpus

    def fit(self, scene, run_dir=None):
        """
        Trained model for the scene's training config.

        Reuses, in this order, the in-process cache and a final checkpoint of
        an earlier run with the same training hash; trains otherwise. A final
        checkpoint short of the requested stop step is resumed.

        :return model, corpus, training log (DataFrame or None):
        """
        key = self.train_hash(scene)
        if key in self._models and not scene["retrain"]:
            return self._models[key]

        trainer, corpus = self.make_trainer(scene, run_dir)
        final = trainer.checkpoint_dir / "final.ckpt"
        target = min(scene["train.stop_step"] or trainer.total_steps, trainer.total_steps)
        if final.exists() and not scene["retrain"]:
            trainer.resume(final)
            if trainer.step < target:
                train_log = trainer.run().log
            else:
                log.info(f"reusing trained model {final} (step {trainer.step})")
                train_log = pd.read_csv(trainer.log_path) if trainer.log_path.exists() else None
        else:
            train_log = trainer.run().log
        self._models[key] = (trainer.model, corpus, train_log)
        return self._models[key]

    def fit_only(self, scene):
        self.fit(scene)
        return self.train_hash(scene)

    def eval_dir(self, scene):
        return self.model_dir(scene) / f"eval_{scene['eval.protocol']}_eta{scene['eval.eta']}"

    def assess(self, scene, model, corpus, out_dir=None):
        """Evaluate on the test split and write the report next to the model."""
        report = evaluate(
            model,
            corpus.split("test"),
            corpus.vocab,
            corpus.lexicon if scene["eval.mam"] else None,
            protocol=scene["eval.protocol"],
            eta=scene["eval.eta"],
            max_len=scene["model.max_len"],
            workers=scene["eval.workers"],
        )
        write_eval_report(report, out_dir or self.eval_dir(scene))
        return report

    def run_scene(self, scene):
        """
        Sets up and runs one experiment.

        :param scene: Dictionary containing all parameters.
        :return: EvalReport and the training log.
        """
        model, corpus, train_log = self.fit(scene)
        report = self.assess(scene, model, corpus)

        if scene["print_final_output"]:
            print(tabulate(report.top_k_frame(5).head(10), headers="keys", showindex=False))

        return report, train_log


def run_sweep(kind, pvalue=None, values=None, multi_pro=False, reset_database=False):
    """
    Train and evaluate once per sweep setting (and seed) and write the
    averaged rows to ``sweep_<kind>.csv`` with a plot.

    :param kind: ``eta``, ``mask_rate`` or ``group``.
    :param reset_database: offer to clear the results database first.
    :return DataFrame: one row per setting, metrics averaged over seeds.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep {kind!r}, expected one of {sorted(SWEEP_KINDS)}")
    x_key, defaults = SWEEP_KINDS[kind]
    values = list(values or defaults)
    pvalue = dict(pvalue or {})
    linked = None

    if kind == "eta":
        pvalue.update({"eval.protocol": "local", "eval.eta": values})
    elif kind == "mask_rate":
        pvalue["data.alpha"] = values
    else:
        max_len = pvalue.get("model.max_len", 24)
        pairs = [tuple(v) for v in values]
        if values == list(defaults):
            pairs = scaled_groups(pairs, max_len)
        linked = {("loss.group_size", "loss.group_stride"): pairs}

    rows = RunExperiment(
        pvalue=pvalue, multi_pro=multi_pro, reset_database=reset_database, linked=linked
    ).run_experiment()
    frame = pd.DataFrame(rows)
    if kind == "group":
        frame["group"] = frame["loss.group_size"].astype(str) + "/" + frame["loss.group_stride"].astype(str)
        order = {f"{p}/{r}": i for i, (p, r) in enumerate(pairs)}
        frame = frame.sort_values("group", key=lambda s: s.map(order), kind="stable")

    hue = "data.mask_mode" if kind == "mask_rate" and frame["data.mask_mode"].nunique() > 1 else None
    by = [x_key] + ([hue] if hue else [])
    metrics = [c for c in METRIC_COLS if c in frame]
    table = frame.groupby(by, sort=False)[metrics].mean().reset_index()
    table["n_seeds"] = frame.groupby(by, sort=False)["seed"].nunique().values

    out_dir = Path(pvalue.get("out_dir", "runs"))
    csv_path, png_path = write_sweep(table.to_dict("records"), kind, x_key, out_dir, hue=hue)
    print(tabulate(table, headers="keys", showindex=False, floatfmt=".4f"))
    log.info(f"sweep written to {csv_path} and {png_path}")
    return table


def run_ablation(pvalue=None, multi_pro=False, reset_database=False):
    """
    Train the ablation ladder and evaluate each rung under its protocols.

    :return DataFrame: one row per (rung, protocol), metrics averaged over seeds.
    """
    pvalue = dict(pvalue or {})
    frames = []
    for label, overrides, protocols in ABLATION_LADDER:
        for protocol in protocols:
            rung = dict(pvalue, **overrides)
            rung["eval.protocol"] = protocol
            rows = RunExperiment(pvalue=rung, multi_pro=multi_pro, reset_database=reset_database).run_experiment()
            reset_database = False
            frame = pd.DataFrame(rows)
            frame.insert(0, "setting", label)
            frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)
    metrics = [c for c in METRIC_COLS if c in frame]
    table = frame.groupby(["setting", "eval.protocol"], sort=False)[metrics].mean().reset_index()
    table["n_seeds"] = frame.groupby(["setting", "eval.protocol"], sort=False)["seed"].nunique().values

    out_dir = Path(pvalue.get("out_dir", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "ablation.csv", index=False, float_format="%.6f")
    print(tabulate(table, headers="keys", showindex=False, floatfmt=".4f"))
    return table


if __name__ == "__main__":
    RunExperiment(print_params=True).run_experiment()
