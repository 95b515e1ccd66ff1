import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from numerics import ContractViolation
from data_synth import (
    DatasetRecord, Vocabulary, build_vocabulary, generate_classification_set, generate_dataset,
    read_dataset, read_vocabulary, write_dataset, write_vocabulary,
)
from corpus_stats import calculate_statistics
from encoders import DualEncoder, encode_images, init_model
from pe_stretch import stretch_model, stretch_summary
from train import REQUIRED_ORIGIN, TrainResult, prepare_model, train
from checkpoint_io import Checkpoint, load_checkpoint, save_checkpoint
from evaluation import (
    effective_length_probe, evaluate_retrieval, resolve_probe_lengths,
    retrieval_payload, write_json, write_probe_csv, zero_shot_classify,
)
from visualizations import (
    ABLATION_DIV_ID, PROBE_DIV_ID, create_ablation_plot, create_probe_plot, write_figure,
)
from settings import ExperimentConfig, write_resolved_config

logger = logging.getLogger(__name__)

PCM_VARIANTS = ("pcm_only", "kps_pcm")
ALTERNATIVE_VARIANTS = ("undistinguished", "mixed_length", "bounded")


def _require_file(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


class ExperimentRunner:
    """Executes one command per call and reports the artifacts it wrote."""

    def __init__(self, config: ExperimentConfig):
        self.config = config

    # -- inputs -------------------------------------------------------------

    def _dataset(self, path) -> List[DatasetRecord]:
        records = read_dataset(_require_file(path))
        if not records:
            raise ContractViolation(f"dataset {path} is empty")
        return records

    def _vocab(self, path) -> Vocabulary:
        return read_vocabulary(_require_file(path))

    def _checkpoint(self, path) -> Checkpoint:
        return load_checkpoint(_require_file(path))

    def _fresh_model(self, vocab: Vocabulary) -> DualEncoder:
        cfg = self.config
        return init_model(cfg.model.model_config_for(len(vocab), cfg.data))

    # -- commands -----------------------------------------------------------

    def gen_data(self, out: str, vocab_path: Optional[str] = None) -> Dict[str, str]:
        """Seeded dataset + vocabulary + caption statistics"""
        data = self.config.data
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        vocab_file = Path(vocab_path) if vocab_path else out_path.with_name("vocab.txt")

        samples = generate_dataset(data.seed, data.n_scenes, data.synth_config())
        records = [s.as_record() for s in samples]
        write_dataset(out_path, records)
        vocab_file.parent.mkdir(parents=True, exist_ok=True)
        write_vocabulary(vocab_file, build_vocabulary())
        stats = calculate_statistics(records)
        stats_file = write_json(out_path.with_name(f"{out_path.stem}.stats.json"), stats)
        config_file = write_resolved_config(self.config, out_path)
        means = {s["column"]: s["mean"] for s in stats["statistics"]}
        logger.info("Wrote %d records to %s (mean words: long %.1f, short %.1f)", len(records), out_path,
                    means.get("long_tokens", 0.0), means.get("short_tokens", 0.0))
        return {"dataset": str(out_path), "vocab": str(vocab_file),
                "stats": str(stats_file), "config": str(config_file)}

    def stretch(self, in_path: str, out_path: str) -> Dict[str, str]:
        """Stretch a checkpoint's text positional table"""
        ckpt = self._checkpoint(in_path)
        spec = self.config.stretch.spec().validate(ckpt.config.context_len)
        stretched = stretch_model(ckpt.model, spec)
        digest = save_checkpoint(out_path, Checkpoint(stretched, step=ckpt.step, config_hash=ckpt.config_hash))
        summary = stretch_summary(ckpt.model.positional, stretched.positional, spec)
        summary["sha256"] = digest
        out = Path(out_path)
        summary_file = write_json(out.with_name(f"{out.stem}.stretch.json"), summary)
        config_file = write_resolved_config(self.config, out)
        return {"checkpoint": str(out), "summary": str(summary_file), "config": str(config_file)}

    def train(self, data_path: str, vocab_path: str, out_path: str,
              init_path: Optional[str] = None) -> Dict[str, str]:
        """Train one variant, starting from a checkpoint or from a fresh model"""
        records = self._dataset(data_path)
        vocab = self._vocab(vocab_path)
        base = self._checkpoint(init_path).model if init_path else self._fresh_model(vocab)
        variant = self.config.train.variant
        model = prepare_model(variant, base, self.config.stretch.variant_specs())
        result = train(self.config.train.train_config(), model, records, vocab, self.config.loss.loss_config())
        return self._write_training(result, Path(out_path))

    def _write_training(self, result: TrainResult, out: Path) -> Dict[str, str]:
        save_checkpoint(out, result.checkpoint)
        log_file = out.with_name(f"{out.stem}.log.csv")
        result.epoch_frame().to_csv(log_file, index=False, lineterminator="\n")
        config_file = write_resolved_config(self.config, out)
        return {"checkpoint": str(out), "log": str(log_file), "config": str(config_file)}

    def eval_retrieval(self, ckpt_path: str, data_path: str, vocab_path: str, out: str) -> Dict[str, str]:
        model = self._checkpoint(ckpt_path).model
        reports = evaluate_retrieval(model, self._dataset(data_path), self._vocab(vocab_path),
                                     ks=self.config.eval.ks)
        report_file = write_json(out, retrieval_payload(reports))
        return {"report": str(report_file), "config": str(write_resolved_config(self.config, out))}

    def _classification_accuracy(self, model: DualEncoder, vocab: Vocabulary) -> Dict[str, Any]:
        ev = self.config.eval
        images, labels, names = generate_classification_set(
            ev.class_seed, ev.n_per_class, ev.n_classes, self.config.data.synth_config()
        )
        accuracy = zero_shot_classify(model, images, labels, names, ev.templates, vocab)
        return {"accuracy": accuracy, "n_images": len(images), "n_classes": len(names),
                "n_templates": len(ev.templates), "chance": 1.0 / len(names), "classes": names}

    def eval_classify(self, ckpt_path: str, vocab_path: str, out: str) -> Dict[str, str]:
        model = self._checkpoint(ckpt_path).model
        report_file = write_json(out, self._classification_accuracy(model, self._vocab(vocab_path)))
        return {"report": str(report_file), "config": str(write_resolved_config(self.config, out))}

    def probe_length(self, ckpt_path: str, data_path: str, vocab_path: str, out: str,
                     plot: Optional[str] = None, tag: Optional[str] = None) -> Dict[str, str]:
        model = self._checkpoint(ckpt_path).model
        records = self._dataset(data_path)
        lengths = resolve_probe_lengths(self.config.eval.probe_lengths, records)
        curve = effective_length_probe(model, records, lengths, self._vocab(vocab_path),
                                       tag=tag or Path(ckpt_path).stem)
        artifacts = {"curve": str(write_probe_csv(out, curve))}
        if plot:
            artifacts["plot"] = str(write_figure(create_probe_plot([curve]), plot, PROBE_DIV_ID))
        artifacts["config"] = str(write_resolved_config(self.config, out))
        return artifacts

    # -- ablation suite -----------------------------------------------------

    def _ablation_row(self, variant: str, result: TrainResult, records: List[DatasetRecord],
                      vocab: Vocabulary) -> Dict[str, Any]:
        model = result.checkpoint.model
        reports = evaluate_retrieval(model, records, vocab, ks=self.config.eval.ks)
        short_r1 = reports["short"]["text_to_image"].recalls[0]
        long_r1 = reports["long"]["text_to_image"].recalls[0]
        return {
            "variant": variant,
            "kps": REQUIRED_ORIGIN.get(variant) == "kps",
            "pcm": variant in PCM_VARIANTS,
            "strategy": variant if variant in ALTERNATIVE_VARIANTS else None,
            "short_r1": short_r1,
            "long_r1": long_r1,
            "mean_r1": (short_r1 + long_r1) / 2,
            "short_i2t_r1": reports["short"]["image_to_text"].recalls[0],
            "long_i2t_r1": reports["long"]["image_to_text"].recalls[0],
            "zero_shot_acc": self._classification_accuracy(model, vocab)["accuracy"],
            "steps": result.checkpoint.step,
            "initial_loss": result.steps[0].total,
            "final_loss": result.epochs[-1].total,
        }

    def ablation_suite(self, out_dir: Optional[str] = None) -> Dict[str, str]:
        """Pretrain once on short captions, fine-tune every variant, evaluate them side by side"""
        cfg = self.config
        root = Path(out_dir or cfg.paths.out_dir)
        data_dir, ckpt_dir = root / "data", root / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        artifacts: Dict[str, str] = {}

        synth = cfg.data.synth_config()
        train_records = [s.as_record() for s in generate_dataset(cfg.data.seed, cfg.data.n_scenes, synth)]
        eval_records = [s.as_record() for s in generate_dataset(cfg.data.eval_seed, cfg.data.n_eval, synth)]
        data_dir.mkdir(parents=True, exist_ok=True)
        write_dataset(data_dir / "train.jsonl", train_records)
        write_dataset(data_dir / "eval.jsonl", eval_records)
        vocab = build_vocabulary()
        write_vocabulary(data_dir / "vocab.txt", vocab)
        artifacts.update({"train_data": str(data_dir / "train.jsonl"), "eval_data": str(data_dir / "eval.jsonl")})

        suite, loss = cfg.suite, cfg.loss.loss_config()
        pretrain_cfg = cfg.train.train_config(
            variant="short_baseline", epochs=suite.pretrain_epochs,
            learning_rate=suite.pretrain_learning_rate, warmup_iters=suite.pretrain_warmup_iters,
        )
        pretrained = train(pretrain_cfg, self._fresh_model(vocab), train_records, vocab, loss)
        save_checkpoint(ckpt_dir / "short_baseline.ckpt", pretrained.checkpoint)
        artifacts["short_baseline"] = str(ckpt_dir / "short_baseline.ckpt")

        results = {"short_baseline": pretrained}
        specs = cfg.stretch.variant_specs()
        for variant in suite.variants:
            if variant == "short_baseline":
                continue
            finetune_cfg = cfg.train.train_config(
                variant=variant, epochs=suite.finetune_epochs,
                learning_rate=suite.finetune_learning_rate, warmup_iters=suite.finetune_warmup_iters,
            )
            result = train(finetune_cfg, prepare_model(variant, pretrained.checkpoint.model, specs),
                           train_records, vocab, loss)
            path = ckpt_dir / f"{variant}.ckpt"
            save_checkpoint(path, result.checkpoint)
            artifacts[variant] = str(path)
            results[variant] = result

        rows = [self._ablation_row(v, r, eval_records, vocab) for v, r in results.items()]
        # every cell of the kps x pcm grid, then the three alternative strategies
        table = {"baseline": "short_baseline", "grid": "kps x pcm", "rows": rows, "n_eval": len(eval_records)}
        artifacts["table"] = str(write_json(root / "ablation.json", table))
        table_csv = root / "ablation.csv"
        pd.DataFrame(rows).to_csv(table_csv, index=False, float_format="%.6f", lineterminator="\n")
        artifacts["table_csv"] = str(table_csv)
        artifacts["table_plot"] = str(write_figure(create_ablation_plot(rows), root / "ablation.html", ABLATION_DIV_ID))

        lengths = resolve_probe_lengths(cfg.eval.probe_lengths, eval_records)
        curves = []
        for variant in ("short_baseline", "kps_pcm"):
            if variant not in results:
                continue
            model = results[variant].checkpoint.model
            image_embs = encode_images(model, [r.image for r in eval_records])
            curve = effective_length_probe(model, eval_records, lengths, vocab, tag=variant, image_embs=image_embs)
            artifacts[f"probe_{variant}"] = str(write_probe_csv(root / f"probe_{variant}.csv", curve))
            curves.append(curve)
        artifacts["probe_plot"] = str(write_figure(create_probe_plot(curves), root / "probe.html", PROBE_DIV_ID))
        artifacts["config"] = str(write_resolved_config(cfg, root / "ablation.json"))

        for row in rows:
            logger.info("%-16s short R@1 %.3f  long R@1 %.3f  zero-shot %.3f",
                        row["variant"], row["short_r1"], row["long_r1"], row["zero_shot_acc"])
        return artifacts
