"""
Pipeline orchestration: one method per stage, artifacts under the run's output directory.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from .augmentation import assemble_balanced, generate_synthetic_rows, minority_rows, plan_rebalance
from .baselines import BASELINES, marginal_shuffle
from .config import RunConfig, output_layout
from .data_formatter import ReportFormatter, file_sha256, write_frame, write_json
from .data_schema import Table, load_csv, schema_path_for, split, write_csv
from .diffusion import load_diffusion, save_diffusion, train_diffusion
from .errors import ArtifactError
from .explain import dependence_export, dependence_file_name, sample_background, shapley, summary_export
from .predictors import evaluate, grid_search, load_gbt, predict_gbt, save_gbt, train_gbt
from .quality_eval import evaluate_quality
from .simulator import calibrate_zero_intercept, default_simulation_spec, default_zip_process, simulate_zip_table
from .validators import require_artifact, require_same_schema
from .vae import extract_latents, load_vae, save_vae, train_vae
from .zip_model import fit_zip, load_zip, save_zip, zip_predict

log = logging.getLogger(__name__)


class PipelineWorkflow:
    """Runs pipeline stages against one RunConfig and records a manifest per stage."""

    def __init__(self, config: RunConfig):
        load_dotenv()
        self.config = config
        self.out_dir = config.out_dir
        self._inputs: List[Path] = []
        self._outputs: List[Path] = []

    # --- Artifact locations ---

    def path(self, directory: str, name: str) -> Path:
        return self.out_dir / directory / name

    @property
    def dataset_path(self) -> Path:
        if self.config.paths.data:
            return Path(self.config.paths.data)
        return self.path(output_layout.DATA_DIR, "dataset.csv")

    @property
    def train_path(self) -> Path:
        return self.path(output_layout.DATA_DIR, "train.csv")

    @property
    def test_path(self) -> Path:
        return self.path(output_layout.DATA_DIR, "test.csv")

    @property
    def vae_path(self) -> Path:
        return self.path(output_layout.CHECKPOINT_DIR, "vae.ckpt")

    @property
    def diffusion_path(self) -> Path:
        return self.path(output_layout.CHECKPOINT_DIR, "diffusion.ckpt")

    @property
    def synthetic_path(self) -> Path:
        return self.path(output_layout.GENERATED_DIR, "synthetic.csv")

    @property
    def balanced_path(self) -> Path:
        return self.path(output_layout.REBALANCED_DIR, "train_balanced.csv")

    def model_path(self, name: str) -> Path:
        return self.path(output_layout.MODEL_DIR, f"{name}.json")

    # --- Bookkeeping ---

    def _read_table(self, path: Path, produced_by: str) -> Table:
        require_artifact(path, produced_by)
        schema_path = Path(self.config.paths.schema_path) if path == self.dataset_path and self.config.paths.schema_path \
            else schema_path_for(path)
        self._inputs += [path, schema_path]
        return load_csv(path, schema_path)

    def _input(self, path: Path, produced_by: str) -> Path:
        self._inputs.append(require_artifact(path, produced_by))
        return path

    def _output(self, path: Path) -> Path:
        self._outputs.append(Path(path))
        return path

    def _write_table(self, table: Table, path: Path) -> Path:
        write_csv(table, path)
        self._output(path)
        self._output(schema_path_for(path))
        return path

    def _relative(self, path: Path) -> str:
        try:
            return Path(path).resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return str(path)

    def _manifest(self, stage: str, sections: Sequence[str]) -> Path:
        """Stage, its config sections and SHA-256 of every input and output; no timestamps."""
        manifest = {
            "stage": stage,
            "config": {name: getattr(self.config, name).model_dump(by_alias=True) for name in sections},
            "inputs": {self._relative(p): file_sha256(p) for p in self._inputs},
            "outputs": {self._relative(p): file_sha256(p) for p in self._outputs},
        }
        self._inputs, self._outputs = [], []
        return write_json(self.path(output_layout.MANIFEST_DIR, f"{stage}.json"), manifest)

    def _training_minority(self) -> Table:
        return minority_rows(self._read_table(self.train_path, "split"))

    # --- Stages ---

    def simulate(self) -> Path:
        settings = self.config.simulate
        spec = default_simulation_spec(settings.max_count)
        process = default_zip_process(settings.hour_cycle, settings.aaht_light_interaction)
        seed = self.config.seeds.simulate
        if settings.target_zero_share is not None and settings.n_rows > 0:
            process = calibrate_zero_intercept(spec, process, settings.target_zero_share, settings.n_rows, seed)
        table = simulate_zip_table(settings.n_rows, spec, process, seed)
        path = self._write_table(table, self.path(output_layout.DATA_DIR, "dataset.csv"))
        self._manifest("simulate", ["simulate", "seeds"])
        return path

    def split(self) -> Dict[str, Path]:
        table = self._read_table(self.dataset_path, "simulate")
        train, test = split(table, self.config.split.train_fraction, self.config.seeds.split,
                            self.config.split.stratify)
        fitted = train.schema.fit(train.frame)
        self._write_table(train.with_schema(fitted), self.train_path)
        self._write_table(test.with_schema(fitted), self.test_path)
        self._manifest("split", ["split", "seeds"])
        return {"train": self.train_path, "test": self.test_path}

    def train_vae(self) -> Path:
        minority = self._training_minority()
        model, history = train_vae(minority, self.config.vae, self.config.seeds.vae)
        save_vae(model, self._output(self.vae_path), history)
        write_json(self._output(self.path(output_layout.REPORT_DIR, "vae_training.json")), history.to_dict())
        self._manifest("train-vae", ["vae", "seeds"])
        return self.vae_path

    def train_diffusion(self) -> Path:
        minority = self._training_minority()
        vae = load_vae(self._input(self.vae_path, "train-vae"))
        latents = extract_latents(vae, minority)
        model, history = train_diffusion(latents, self.config.diffusion, self.config.seeds.diffusion)
        save_diffusion(model, self._output(self.diffusion_path), vae.schema, history)
        write_json(self._output(self.path(output_layout.REPORT_DIR, "diffusion_training.json")),
                   {"losses": history.losses})
        self._manifest("train-diffusion", ["diffusion", "seeds"])
        return self.diffusion_path

    def generate(self) -> Path:
        train = self._read_table(self.train_path, "split")
        plan = plan_rebalance(train, self.config.rebalance.ratio)
        vae = load_vae(self._input(self.vae_path, "train-vae"))
        diffusion = load_diffusion(self._input(self.diffusion_path, "train-diffusion"),
                                   vae.latent_dim, vae.schema)
        synthetic = generate_synthetic_rows(vae, diffusion, plan.to_generate, self.config.seeds.generate,
                                            deterministic=self.config.diffusion.deterministic,
                                            attempts_factor=self.config.rebalance.attempts_factor,
                                            min_acceptance=self.config.rebalance.min_acceptance)
        self._write_table(synthetic, self.synthetic_path)
        write_json(self._output(self.path(output_layout.GENERATED_DIR, "plan.json")), plan.to_dict())
        self._manifest("generate", ["rebalance", "diffusion", "seeds"])
        return self.synthetic_path

    def _synthetic_rows(self, train: Table, n: int) -> Table:
        method = self.config.rebalance.method
        if method == "vae-diffusion":
            synthetic = self._read_table(self.synthetic_path, "generate")
            require_same_schema(train.schema, synthetic.schema)
            return synthetic.take(np.arange(min(n, len(synthetic))))
        return BASELINES[method](minority_rows(train), n, self.config.seeds.generate)

    def rebalance(self) -> Path:
        train = self._read_table(self.train_path, "split")
        plan = plan_rebalance(train, self.config.rebalance.ratio)
        synthetic = self._synthetic_rows(train, plan.to_generate)
        if len(synthetic) != plan.to_generate:
            raise ArtifactError(f"Expected {plan.to_generate} synthetic rows, found {len(synthetic)} "
                                f"(rerun `crashsynth generate` after changing the rebalance settings)")
        balanced = assemble_balanced(train, synthetic)
        self._write_table(balanced, self.balanced_path)
        self._manifest("rebalance", ["rebalance", "seeds"])
        return self.balanced_path

    def eval_quality(self) -> Dict[str, Any]:
        real = self._training_minority()
        synthetic = self._read_table(self.synthetic_path, "generate")
        require_same_schema(real.schema, synthetic.schema)
        quality_dir = self.out_dir / output_layout.QUALITY_DIR
        reports = {}
        report = evaluate_quality(real, synthetic, self.config.quality, self.config.seeds.quality,
                                  quality_dir / "density")
        self._outputs += report.density.files
        reports["vae-diffusion"] = report.to_dict()
        baseline = marginal_shuffle(real, len(real), self.config.seeds.quality)
        reports["marginal"] = evaluate_quality(real, baseline, self.config.quality,
                                               self.config.seeds.quality).to_dict()
        write_json(self._output(quality_dir / "report.json"), reports)
        for name, values in reports.items():
            log.info("%s\n%s", name, ReportFormatter.quality(values))
        self._manifest("eval-quality", ["quality", "seeds"])
        return reports

    def fit_predictor(self) -> Dict[str, Path]:
        settings = self.config.predictor
        written = {}
        sources = {"gbt_original": (self.train_path, "split"), "gbt_balanced": (self.balanced_path, "rebalance")}
        for name, (path, produced_by) in sources.items():
            table = self._read_table(path, produced_by)
            best, cv = grid_search(table, settings.grid, settings.folds, self.config.seeds.predictor)
            model = train_gbt(table, best, self.config.seeds.predictor)
            written[name] = save_gbt(model, self._output(self.model_path(name)))
            write_frame(cv, self._output(self.path(output_layout.REPORT_DIR, f"cv_{name}.csv")))
        self._manifest("fit-predictor", ["predictor", "seeds"])
        return written

    def fit_zip(self) -> Path:
        train = self._read_table(self.train_path, "split")
        params = fit_zip(train, self.config.zip)
        path = save_zip(params, self._output(self.model_path("zip")))
        self._manifest("fit-zip", ["zip"])
        return path

    def evaluate(self) -> pd.DataFrame:
        test = self._read_table(self.test_path, "split")
        targets = test.target_values()
        rows = []
        for name in ("gbt_original", "gbt_balanced", "zip"):
            path = self.model_path(name)
            if not path.exists():
                log.warning("No %s model at %s; skipped", name, path)
                continue
            self._input(path, "fit-zip" if name == "zip" else "fit-predictor")
            predictions = zip_predict(load_zip(path), test) if name == "zip" else predict_gbt(load_gbt(path), test)
            report = evaluate(predictions, targets)
            report.write_csv(self._output(self.path(output_layout.REPORT_DIR, f"accuracy_{name}.csv")), name)
            rows.append(report.to_dict(name))
        if not rows:
            require_artifact(self.model_path("gbt_original"), "fit-predictor")
        frame = pd.DataFrame(rows)
        write_frame(frame, self._output(self.path(output_layout.REPORT_DIR, "accuracy.csv")))
        write_json(self._output(self.path(output_layout.REPORT_DIR, "accuracy.json")), rows)
        log.info("Prediction accuracy on the test split\n%s", ReportFormatter.accuracy(rows))
        self._manifest("evaluate", [])
        return frame

    def explain(self) -> Path:
        settings = self.config.explain
        model = load_gbt(self._input(self.model_path(settings.model), "fit-predictor"))
        train = self._read_table(self.train_path, "split")
        test = self._read_table(self.test_path, "split")
        background = sample_background(train, settings.background_size, self.config.seeds.explain)
        rows = sample_background(test, settings.n_rows, self.config.seeds.explain + 1)
        result = shapley(model, rows, background, settings.mode, self.config.seeds.explain,
                         settings.n_permutations)
        explain_dir = self.out_dir / output_layout.EXPLAIN_DIR
        export = summary_export(result, out_dir=explain_dir)
        self._outputs += export.files
        dependence_export(result, settings.feature, settings.interaction_feature, explain_dir,
                          sort=settings.sort_dependence)
        self._output(explain_dir / dependence_file_name(settings.feature, settings.interaction_feature))
        log.info("Feature importance (mean |phi|)\n%s", ReportFormatter.importance(export.ranking))
        self._manifest("explain", ["explain", "seeds"])
        return explain_dir

    STAGE_METHODS = {
        "simulate": "simulate",
        "split": "split",
        "train-vae": "train_vae",
        "train-diffusion": "train_diffusion",
        "generate": "generate",
        "rebalance": "rebalance",
        "eval-quality": "eval_quality",
        "fit-predictor": "fit_predictor",
        "fit-zip": "fit_zip",
        "evaluate": "evaluate",
        "explain": "explain",
    }

    def run_stage(self, stage: str):
        log.info("Running stage %s", stage)
        return getattr(self, self.STAGE_METHODS[stage])()

    def run_pipeline(self, stages: Optional[Sequence[str]] = None) -> None:
        """Run stages in pipeline order; ``simulate`` is skipped when ``paths.data`` names a dataset."""
        for stage in stages or output_layout.STAGES:
            if stage == "simulate" and self.config.paths.data:
                log.info("Using dataset %s; simulate skipped", self.config.paths.data)
                continue
            self.run_stage(stage)
