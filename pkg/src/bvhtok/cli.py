"""Command-line pipeline.

Artifacts under ``--out-dir``::

    raw/              synthetic BVH files + manifest.tsv          (synth)
    processed/        canonical BVH, theta caches, manifest.tsv,
                      rejections.tsv                              (preprocess, split)
    owo.ckpt          pretrained graph encoder                    (pretrain)
    tat.ckpt          tokenizer                                   (train)
    logs/*.jsonl      one JSON record per optimization step
    metrics.tsv       metric<TAB>dataset<TAB>value rows           (eval)
    sweep/*.tsv       ablation tables                             (sweep)

Every checkpoint records the hash of the config sections it depends on and
the sha256 of its upstream artifacts; downstream stages refuse mismatches
unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import corpus as cp
from . import metrics as mt
from . import numerics as nx
from . import owo as ow
from . import tat as tt
from .bvh_io import BvhError, parse_bvh, write_bvh
from .config import ConfigError, PipelineConfig, config_hash, dump_config, load_config
from .motion import MotionTheta, pose_sequence_from_theta, theta_from_pose_sequence
from .skeleton import CanonicalizationRejected, Skeleton, canonicalize, forward_kinematics, motion_to_document

log = logging.getLogger("bvhtok")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out_dir, seed: int = 0, force: bool = False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.seed = seed
        self.force = force
        self.embedder = ow.HashNameEmbedder()
        self.out.mkdir(parents=True, exist_ok=True)

    # paths
    @property
    def processed(self) -> Path:
        return self.out / "processed"

    @property
    def owo_path(self) -> Path:
        return self.out / "owo.ckpt"

    @property
    def tat_path(self) -> Path:
        return self.out / "tat.ckpt"

    def require(self, stage: str, path: Path, what: str) -> Path:
        if not path.exists():
            raise StageError(stage, f"missing prerequisite {what}: {path}")
        return path

    def _lineage(self, stage: str, ok: bool, message: str) -> None:
        if ok:
            return
        if self.force:
            log.warning("%s: %s (continuing because of --force)", stage, message)
            return
        raise StageError(stage, message + " (use --force to override)")

    def _append_log(self, name: str, records) -> None:
        d = self.out / "logs"
        d.mkdir(exist_ok=True)
        with open(d / f"{name}.jsonl", "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    # stages
    def synth(self) -> cp.CorpusManifest:
        return cp.synth_corpus(self.out / "raw", self.seed, self.cfg.synth)

    def preprocess(self, manifest_path: Optional[str] = None) -> cp.PreprocessResult:
        src = Path(manifest_path) if manifest_path else self.require("preprocess", self.out / "raw" / "manifest.tsv", "manifest")
        try:
            manifest = cp.read_manifest(src)
        except (ValueError, FileNotFoundError) as exc:
            raise StageError("preprocess", str(exc)) from None
        result = cp.preprocess(manifest, self.processed, self.cfg.canon)
        total = len(manifest.entries)
        assert len(result.manifest.entries) + len(result.rejections) == total
        return result

    def split(self, manifest_path: Optional[str] = None) -> cp.CorpusManifest:
        src = Path(manifest_path) if manifest_path else self.require("split", self.processed / "manifest.tsv", "manifest")
        manifest = cp.read_manifest(src)
        try:
            out = cp.split_manifest(manifest, self.cfg.split.test_ratio, self.seed, self.cfg.split.family_coverage)
        except ValueError as exc:
            raise StageError("split", str(exc)) from None
        cp.write_manifest(out, src)
        return out

    def _manifest(self, stage: str) -> cp.CorpusManifest:
        m = cp.read_manifest(self.require(stage, self.processed / "manifest.tsv", "preprocessed manifest"))
        if not m.with_split("train"):
            raise StageError(stage, "manifest has no train split; run the split stage first")
        return m

    def _load_entries(self, manifest: cp.CorpusManifest, split: str):
        out = []
        for e in manifest.with_split(split):
            skel, poses, ft = cp.load_motion(manifest.resolve(e), self.cfg.canon)
            out.append((e, skel, poses, ft))
        return out

    def _unique_skeletons(self, entries) -> list[Skeleton]:
        seen, skels = set(), []
        for _, skel, _, _ in entries:
            if skel.identity() not in seen:
                seen.add(skel.identity())
                skels.append(skel)
        return skels

    def pretrain(self, pretrain_cfg: Optional[ow.PretrainConfig] = None, path: Optional[Path] = None,
                 skip_training: bool = False) -> ow.OwoModel:
        manifest = self._manifest("pretrain")
        entries = self._load_entries(manifest, "train")
        skels = self._unique_skeletons(entries)
        pcfg = replace(pretrain_cfg or self.cfg.pretrain, seed=self.seed)
        if skip_training:
            with nx.seeded(pcfg.seed):
                model = ow.OwoModel(self.cfg.owo)
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            history = []
        else:
            model, history = ow.pretrain_owo(skels, pcfg, self.cfg.owo, self.embedder)
        meta = {
            "stage": "pretrain",
            "config_hash": config_hash(owo=self.cfg.owo, pretrain=pcfg),
            "model_config": asdict(self.cfg.owo),
            "pretrain_config": asdict(pcfg),
            "upstream": {"manifest": sha256_file(self.processed / "manifest.tsv")},
            "final_loss": history[-1]["loss"] if history else None,
        }
        self._save(path or self.owo_path, model, meta)
        self._append_log("pretrain", history)
        return model

    @staticmethod
    def _save(path: Path, model: torch.nn.Module, meta: dict) -> None:
        arrays = nx.module_arrays(model)
        store = getattr(model, "optimizer_store", None)
        if store is not None:
            arrays.update(store.state_arrays())
            meta["optimizer_step"] = store.step
        nx.save_checkpoint(path, arrays, meta)

    def _owo_hash(self, pretrain_cfg: Optional[ow.PretrainConfig] = None) -> str:
        pcfg = replace(pretrain_cfg or self.cfg.pretrain, seed=self.seed)
        return config_hash(owo=self.cfg.owo, pretrain=pcfg)

    def _tat_hash(self) -> str:
        return config_hash(tat=self.cfg.tat, train=replace(self.cfg.train, seed=self.seed))

    def load_owo(self, stage: str, path: Optional[Path] = None) -> tuple[ow.OwoModel, dict]:
        arrays, meta = nx.load_checkpoint(self.require(stage, path or self.owo_path, "pretrained graph encoder (run pretrain)"))
        model = ow.OwoModel(ow.OwoConfig(**meta["model_config"]))
        nx.load_module_arrays(model, arrays)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model, meta

    def train(self, tat_cfg: Optional[tt.TatConfig] = None, train_cfg: Optional[tt.TrainConfig] = None,
              owo_path: Optional[Path] = None, path: Optional[Path] = None,
              owo_hash: Optional[str] = None) -> tt.TatModel:
        owo_path = owo_path or self.owo_path
        owo_model, owo_meta = self.load_owo("train", owo_path)
        self._lineage("train", owo_meta.get("config_hash") == (owo_hash or self._owo_hash()),
                      "graph encoder checkpoint was produced with a different [owo]/[pretrain] config or seed")
        manifest = self._manifest("train")
        entries = self._load_entries(manifest, "train")
        tcfg = replace(train_cfg or self.cfg.train, seed=self.seed)
        mcfg = tat_cfg or self.cfg.tat
        torch.set_num_threads(1)
        model, history = tt.train_tat([(s, p) for _, s, p, _ in entries], owo_model, self.embedder, tcfg, mcfg)
        meta = {
            "stage": "train",
            "config_hash": config_hash(tat=mcfg, train=tcfg),
            "model_config": asdict(mcfg),
            "train_config": asdict(tcfg),
            "upstream": {"owo": sha256_file(owo_path)},
            "final_loss": history[-1]["total"],
        }
        self._save(path or self.tat_path, model, meta)
        self._append_log("train", history)
        return model

    def load_tat(self, stage: str, path: Optional[Path] = None, owo_path: Optional[Path] = None) -> tuple[tt.TatModel, dict]:
        arrays, meta = nx.load_checkpoint(self.require(stage, path or self.tat_path, "tokenizer checkpoint (run train)"))
        model = tt.TatModel(tt.TatConfig(**meta["model_config"]))
        nx.load_module_arrays(model, arrays)
        model.eval()
        self._lineage(stage, meta.get("config_hash") == self._tat_hash(),
                      "tokenizer checkpoint was produced with a different [tat]/[train] config or seed")
        owo_path = owo_path or self.owo_path
        if owo_path.exists():
            self._lineage(stage, meta["upstream"].get("owo") == sha256_file(owo_path),
                          "tokenizer was trained against a different graph encoder checkpoint")
        return model, meta

    def _canonical_input(self, stage: str, path) -> tuple[Skeleton, object, float]:
        try:
            canon = canonicalize(parse_bvh(Path(path).read_text(encoding="utf-8")), self.cfg.canon)
        except (OSError, BvhError, CanonicalizationRejected) as exc:
            raise StageError(stage, f"{path}: {exc}") from None
        return canon.skeleton, canon.poses, canon.frame_time

    def encode(self, input_path, output_path) -> tt.TokenSequence:
        owo_model, _ = self.load_owo("encode")
        model, _ = self.load_tat("encode")
        skel, poses, ft = self._canonical_input("encode", input_path)
        theta = theta_from_pose_sequence(skel, poses, ft)
        with torch.no_grad():
            h = ow.embed_skeleton(skel, self.embedder, owo_model)
        try:
            _, tokens = tt.encode(theta, h, model, initial_root=poses.root_positions[0])
        except ValueError as exc:
            raise StageError("encode", str(exc)) from None
        dropped = theta.num_frames - tokens.num_tokens * tokens.r
        if dropped:
            log.info("encode: %d trailing frames beyond r * floor(T / r) were dropped", dropped)
        meta = {"source": str(input_path), "source_frames": theta.num_frames,
                "skeleton": skel.identity(), "upstream": {"tat": sha256_file(self.tat_path)}}
        tt.save_tokens(output_path, tokens, meta)
        return tokens

    def _write_motion(self, skel: Skeleton, theta: MotionTheta, initial_root, output_path) -> None:
        poses = pose_sequence_from_theta(skel, theta, initial_root)
        Path(output_path).write_text(write_bvh(motion_to_document(skel, poses, theta.frame_time)), encoding="utf-8")

    def decode(self, tokens_path, skeleton_path, output_path) -> MotionTheta:
        owo_model, _ = self.load_owo("decode")
        model, _ = self.load_tat("decode")
        try:
            tokens, meta = tt.load_tokens(self.require("decode", Path(tokens_path), "token file"))
        except ValueError as exc:
            raise StageError("decode", str(exc)) from None
        self._lineage("decode", meta.get("upstream", {}).get("tat") == sha256_file(self.tat_path),
                      "token file was produced by a different tokenizer checkpoint")
        skel, _, _ = self._canonical_input("decode", skeleton_path)
        with torch.no_grad():
            h = ow.embed_skeleton(skel, self.embedder, owo_model)
        try:
            theta = tt.decode(tokens, h, model, skeleton_id=skel.identity())
        except ValueError as exc:
            raise StageError("decode", str(exc)) from None
        self._write_motion(skel, theta, tokens.initial_root, output_path)
        return theta

    def transfer(self, input_path, target_path, output_path) -> MotionTheta:
        owo_model, _ = self.load_owo("transfer")
        model, _ = self.load_tat("transfer")
        skel_a, poses, ft = self._canonical_input("transfer", input_path)
        skel_b, _, _ = self._canonical_input("transfer", target_path)
        theta = theta_from_pose_sequence(skel_a, poses, ft)
        out = tt.transfer(theta, skel_a, skel_b, owo_model, model, self.embedder)
        # the target's own rest root height keeps the result on its feet
        root = poses.root_positions[0] - skel_a.rest_offsets[0] + skel_b.rest_offsets[0]
        self._write_motion(skel_b, out, root, output_path)
        return out

    def evaluate(self, owo_model=None, model=None, split: str = "test") -> list[tuple[str, str, float]]:
        if owo_model is None:
            owo_model, _ = self.load_owo("eval")
        if model is None:
            model, _ = self.load_tat("eval")
        manifest = self._manifest("eval")
        entries = self._load_entries(manifest, split)
        if not entries:
            raise StageError("eval", f"no entries in the {split} split")
        rows: list[tuple[str, str, float]] = []
        per_family: dict[str, list[float]] = {}
        err, err_nt, geo, real_f, gen_f = [], [], [], [], []
        for e, skel, poses, ft in entries:
            cache = self.processed / "theta" / (Path(e.path).stem + ".npy")
            data = np.load(cache) if cache.exists() else theta_from_pose_sequence(skel, poses, ft).data
            theta = MotionTheta(data, skel.identity(), ft)
            with torch.no_grad():
                h = ow.embed_skeleton(skel, self.embedder, owo_model)
            rec = tt.reconstruct(theta, h, model)
            T = rec.num_frames
            gt_poses = pose_sequence_from_theta(skel, MotionTheta(data[:T], "", ft), poses.root_positions[0])
            pred_poses = pose_sequence_from_theta(skel, rec, poses.root_positions[0])
            gt_pos = forward_kinematics(skel, gt_poses)[0]
            pred_pos = forward_kinematics(skel, pred_poses)[0]
            err.append(mt.mpjpe(pred_pos, gt_pos))
            err_nt.append(mt.mpjpe_no_translation(pred_pos, gt_pos))
            geo.append(mt.mean_geodesic_degrees(pred_poses.local_rotations, gt_poses.local_rotations))
            real_f.append(mt.motion_features(data[:T]))
            gen_f.append(mt.motion_features(rec.data))
            per_family.setdefault(e.family, []).append(err[-1])
        tag = f"synthetic-{split}"
        rows += [("mpjpe", tag, float(np.mean(err))), ("mpjpe_no_trans", tag, float(np.mean(err_nt))),
                 ("geodist_deg", tag, float(np.mean(geo)))]
        if len(entries) >= 2:
            rows.append(("fid_stats_features", tag, mt.fid(mt.FeatureSet(real_f), mt.FeatureSet(gen_f, "generated"))))
            real, gen = np.stack(real_f), np.stack(gen_f)
            sim = -np.linalg.norm(real[:, None] - gen[None], axis=-1)
            k = min(self.cfg.eval.r_precision_k, len(entries))
            rows.append((f"r_precision_top{k}", tag, mt.r_precision(sim, k)))
        for fam in sorted(per_family):
            rows.append(("mpjpe", f"{tag}/{fam}", float(np.mean(per_family[fam]))))
        return rows

    def write_metrics(self, rows, path: Optional[Path] = None) -> None:
        path = path or self.out / "metrics.tsv"
        lines = ["#bvhtok-metrics\tv1", "metric\tdataset\tvalue"]
        lines += [f"{n}\t{d}\t{v:.6f}" for n, d, v in rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def sweep(self) -> dict[str, list[dict]]:
        sw = self.cfg.sweep
        d = self.out / "sweep"
        d.mkdir(exist_ok=True)
        loss_table = []
        for pre, off, lca, dist, con in ow.LOSS_ABLATION_ROWS:
            pcfg = replace(self.cfg.pretrain, steps=sw.pretrain_steps, offset=bool(off), lca=bool(lca),
                           dist=bool(dist), con=bool(con))
            owo_path = d / "owo_sweep.ckpt"
            tat_path = d / "tat_sweep.ckpt"
            owo_model = self.pretrain(pcfg, owo_path, skip_training=not pre)
            model = self.train(train_cfg=replace(self.cfg.train, steps=sw.train_steps), owo_path=owo_path,
                               path=tat_path, owo_hash=self._owo_hash(pcfg))
            metrics = dict(((n, v) for n, tag, v in self.evaluate(owo_model, model) if "/" not in tag))
            loss_table.append({"pretrain": int(pre), "offset": off, "lca": lca, "dist": dist, "con": con,
                           "mpjpe": metrics["mpjpe"], "mpjpe_no_trans": metrics["mpjpe_no_trans"],
                           "geodist_deg": metrics["geodist_deg"]})
        self._write_table(d / "loss_ablation.tsv", loss_table)
        owo_path = d / "owo_sweep.ckpt"
        pcfg = replace(self.cfg.pretrain, steps=sw.pretrain_steps)
        owo_model = self.pretrain(pcfg, owo_path)
        depth_table = []
        for R in self.cfg.depths():
            model = self.train(tat_cfg=replace(self.cfg.tat, num_quantizers=R),
                               train_cfg=replace(self.cfg.train, steps=sw.train_steps),
                               owo_path=owo_path, path=d / "tat_sweep.ckpt", owo_hash=self._owo_hash(pcfg))
            metrics = dict(((n, v) for n, tag, v in self.evaluate(owo_model, model) if "/" not in tag))
            depth_table.append({"rvq_depth": R, "mpjpe": metrics["mpjpe"], "mpjpe_no_trans": metrics["mpjpe_no_trans"],
                            "geodist_deg": metrics["geodist_deg"]})
        self._write_table(d / "rvq_depth.tsv", depth_table)
        return {"loss_table": loss_table, "depth_table": depth_table}

    @staticmethod
    def _write_table(path: Path, rows: list[dict]) -> None:
        cols = list(rows[0])
        lines = ["\t".join(cols)]
        for r in rows:
            lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_rows(rows) -> str:
    width = max(len(n) for n, _, _ in rows)
    dwidth = max(len(d) for _, d, _ in rows)
    return "\n".join(f"{n:<{width}}  {d:<{dwidth}}  {v:10.6f}" for n, d, v in rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bvhtok", description="Skeleton-agnostic motion tokenizer pipeline")
    p.add_argument("--config", help="INI config file (defaults to desk-scale settings)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/default")
    p.add_argument("--force", action="store_true", help="continue past config/lineage mismatches")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="write a synthetic BVH corpus")
    for name in ("preprocess", "split"):
        s = sub.add_parser(name)
        s.add_argument("--manifest", help="manifest to read (defaults to the previous stage's output)")
    sub.add_parser("pretrain", help="pretrain the skeleton graph encoder")
    sub.add_parser("train", help="train the tokenizer")
    s = sub.add_parser("encode")
    s.add_argument("input")
    s.add_argument("output")
    s = sub.add_parser("decode")
    s.add_argument("tokens")
    s.add_argument("skeleton", help="BVH file whose hierarchy is the target skeleton")
    s.add_argument("output")
    s = sub.add_parser("transfer")
    s.add_argument("input")
    s.add_argument("target", help="BVH file whose hierarchy is the target skeleton")
    s.add_argument("output")
    s = sub.add_parser("eval")
    s.add_argument("--split", default="test", choices=["train", "test"])
    sub.add_parser("sweep", help="loss-toggle and RVQ-depth ablations")
    sub.add_parser("config", help="print the effective configuration")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config)
        pipe = Pipeline(cfg, args.out_dir, args.seed, args.force or cfg.eval.force)
        start = time.time()
        if stage == "config":
            print(dump_config(cfg))
        elif stage == "synth":
            m = pipe.synth()
            print(f"synth: wrote {len(m.entries)} files to {pipe.out / 'raw'}")
        elif stage == "preprocess":
            r = pipe.preprocess(args.manifest)
            print(f"preprocess: {len(r.manifest.entries)} accepted, {len(r.rejections)} rejected")
            for rej in r.rejections:
                print(f"  rejected {rej.path} [{rej.step}] {rej.reason}")
        elif stage == "split":
            m = pipe.split(args.manifest)
            print(f"split: {len(m.with_split('train'))} train, {len(m.with_split('test'))} test")
        elif stage == "pretrain":
            pipe.pretrain()
            print(f"pretrain: wrote {pipe.owo_path}")
        elif stage == "train":
            pipe.train()
            print(f"train: wrote {pipe.tat_path}")
        elif stage == "encode":
            t = pipe.encode(args.input, args.output)
            print(f"encode: {t.num_tokens} x {t.depth} codes -> {args.output}")
        elif stage == "decode":
            th = pipe.decode(args.tokens, args.skeleton, args.output)
            print(f"decode: {th.num_frames} frames, {th.num_joints} joints -> {args.output}")
        elif stage == "transfer":
            th = pipe.transfer(args.input, args.target, args.output)
            print(f"transfer: {th.num_frames} frames, {th.num_joints} joints -> {args.output}")
        elif stage == "eval":
            rows = pipe.evaluate(split=args.split)
            pipe.write_metrics(rows)
            print(format_rows(rows))
        elif stage == "sweep":
            tables = pipe.sweep()
            for name, rows in tables.items():
                print(f"{name}:")
                for r in rows:
                    print("  " + "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
        log.info("%s finished in %.1fs", stage, time.time() - start)
        return 0
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ow.TrainingDiverged) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
