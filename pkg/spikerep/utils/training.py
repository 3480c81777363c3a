"""Training loop, checkpoints and representation extraction."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from spikerep.utils.augment import AugmentSpec, ViewPair, make_view_batch
from spikerep.utils.errors import PipelineError
from spikerep.utils.recording_io import SnippetSet
from spikerep.utils.repmodel import (
    ModelConfig,
    SpikeRepNet,
    TrainConfig,
    build_optimizer,
    compute_losses,
    lr_at,
    momentum_update,
)
from spikerep.utils.seeding import substream, torch_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOG_COLUMNS = ["epoch", "loss_contrastive", "loss_denoise", "lr"]


@dataclass
class ModelState:
    model: SpikeRepNet
    optimizer: torch.optim.Optimizer
    model_config: ModelConfig
    train_config: TrainConfig
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_config.seed


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> ModelState:
    """Fresh online/target networks seeded from the run seed, global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(train_config.seed, "model", "init"))
        model = SpikeRepNet(model_config)
    return ModelState(model, build_optimizer(model, train_config), model_config, train_config)


def _as_tensor(a: np.ndarray, like: torch.nn.Module) -> torch.Tensor:
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def train_step(state: ModelState, views: ViewPair, steps_per_epoch: int = 1) -> Tuple[float, float]:
    """One optimizer update on a batch of view pairs, followed by the momentum update."""
    if len(views.view1) < 2:
        raise PipelineError("A training batch needs at least 2 snippets", "batch_too_small", {"B": len(views.view1)})
    model = state.model
    model.train()
    lr = lr_at(state.step, state.train_config, steps_per_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    terms = compute_losses(
        model,
        _as_tensor(views.view1, model),
        _as_tensor(views.view2, model),
        _as_tensor(views.clean, model),
        torch.as_tensor(views.mask1),
        torch.as_tensor(views.mask2),
    )
    if not torch.isfinite(terms.total):
        raise PipelineError(
            f"Non-finite loss at step {state.step}",
            "non_finite_loss",
            {"step": state.step, "contrastive": float(terms.contrastive), "denoise": float(terms.denoise), "lr": lr},
        )
    state.optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    state.optimizer.step()
    momentum_update(model, state.model_config.momentum)
    state.step += 1
    return float(terms.contrastive), float(terms.denoise)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train(state: ModelState, snippets: SnippetSet, aug: AugmentSpec, epochs: Optional[int] = None,
          log_path: Optional[PathLike] = None) -> pd.DataFrame:
    """Run ``epochs`` epochs (default: the configured count) and return the per-epoch log."""
    n = len(snippets)
    if n < 2:
        raise PipelineError("Training needs at least 2 snippets", "degenerate_input", {"n_snippets": n})
    cfg = state.train_config
    epochs = cfg.epochs if epochs is None else epochs
    values = snippets.values
    orders = snippets.depth_orders()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    if n % cfg.batch_size == 1 and steps_per_epoch > 1:
        steps_per_epoch -= 1
    first_epoch = len(state.history)

    for epoch in range(first_epoch, first_epoch + epochs):
        losses = []
        for batch in _batches(n, cfg.batch_size, substream(cfg.seed, "train", "shuffle", epoch)):
            views = make_view_batch(values, batch, aug, cfg.seed, epoch, orders)
            losses.append(train_step(state, views, steps_per_epoch))
        contrastive, denoise = np.mean(losses, axis=0)
        row = {
            "epoch": epoch,
            "loss_contrastive": float(contrastive),
            "loss_denoise": float(denoise),
            "lr": lr_at(state.step, cfg, steps_per_epoch),
        }
        state.history.append(row)
        logger.info(f"Epoch {epoch}: contrastive {contrastive:.4f}, denoise {denoise:.4f}, lr {row['lr']:.2e}")

    log = pd.DataFrame(state.history, columns=LOG_COLUMNS)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)
    return log


@torch.no_grad()
def embed(values: np.ndarray, state: ModelState, use_dae: bool = False, batch_size: int = 1024) -> np.ndarray:
    """N×rep_dim representations of full (uncropped) snippets, in evaluation mode."""
    model = state.model
    values = np.asarray(values)
    cfg = state.model_config
    if values.ndim != 3 or values.shape[1:] != (cfg.snippet_samples, cfg.snippet_channels):
        raise PipelineError(
            f"Snippets of shape {values.shape[1:]} do not fit a {cfg.snippet_samples}×{cfg.snippet_channels} model",
            "shape_mismatch",
            {"shape": list(values.shape)},
        )
    model.eval()
    chunks = [
        model.represent(_as_tensor(values[i:i + batch_size], model), use_dae=use_dae).cpu().numpy()
        for i in range(0, len(values), batch_size)
    ]
    if not chunks:
        return np.zeros((0, cfg.rep_dim), dtype=np.float32)
    reps = np.concatenate(chunks).astype(np.float32)
    if not np.all(np.isfinite(reps)):
        raise PipelineError("Encoder produced non-finite representations", "non_finite", {})
    return reps


def _checkpoint_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".ckpt" else path
    return stem.with_suffix(".ckpt"), stem.with_suffix(".manifest.json")


def save_checkpoint(state: ModelState, path: PathLike) -> Path:
    ckpt_path, manifest_path = _checkpoint_paths(path)
    tensors = state.model.state_dict()
    manifest = {
        "step": state.step,
        "seed": state.seed,
        "model_config": asdict(state.model_config),
        "train_config": asdict(state.train_config),
        "parameters": {name: list(t.shape) for name, t in tensors.items()},
        "history": state.history,
    }
    try:
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"model": tensors, "optimizer": state.optimizer.state_dict(), "step": state.step}, ckpt_path)
        manifest_path.write_text(json.dumps(manifest, indent=2))
    except OSError as e:
        logger.error(f"Error saving checkpoint {ckpt_path}: {str(e)}")
        raise PipelineError(f"Cannot write {ckpt_path}: {e}", "unwritable_path", {"path": str(ckpt_path)}) from e
    logger.info(f"Saved checkpoint {ckpt_path} at step {state.step}")
    return ckpt_path


def read_manifest(path: PathLike) -> Dict:
    _, manifest_path = _checkpoint_paths(path)
    if not manifest_path.exists():
        raise PipelineError(f"Missing checkpoint manifest {manifest_path}", "missing_input", {"path": str(manifest_path)})
    return json.loads(manifest_path.read_text())


def load_checkpoint(path: PathLike) -> ModelState:
    ckpt_path, _ = _checkpoint_paths(path)
    manifest = read_manifest(path)
    if not ckpt_path.exists():
        raise PipelineError(f"Missing checkpoint {ckpt_path}", "missing_input", {"path": str(ckpt_path)})
    model_config = ModelConfig(**manifest["model_config"])
    train_config = TrainConfig(**manifest["train_config"])
    state = init_state(model_config, train_config)
    payload = torch.load(ckpt_path, map_location="cpu", weights_only=True)
    shapes = {name: list(t.shape) for name, t in payload["model"].items()}
    if shapes != manifest["parameters"]:
        raise PipelineError("Checkpoint tensors disagree with the manifest", "size_mismatch", {"path": str(ckpt_path)})
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = int(payload["step"])
    state.history = list(manifest.get("history", []))
    return state
