"""
Gaussian-NLL training loop for PPAPModel and the matching evaluation helper.

One call trains one (fold, seed) run: gamma statistics come from the training
split before the first epoch, the weights with the lowest validation NLL are
kept, and every epoch adds a row to the metrics history.
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from vivarium_ppap import numerics
from vivarium_ppap.data import TrainingData
from vivarium_ppap.errors import DataValidationError, NumericalError
from vivarium_ppap.model import GammaStats, ModelConfig, PPAPModel, nll_loss, randomize_silent_gammas, save_weights
from vivarium_ppap.utils.atomic import atomic_path

logger = logging.getLogger(__name__)

DEFAULT_LR = 5e-5
DEFAULT_MAX_EPOCHS = 100
DEFAULT_BATCH_SIZE = 32
METRIC_COLUMNS = ['epoch', 'train_loss', 'val_mse', 'val_mae', 'val_nll']


@dataclass
class TrainingResult:
    model: PPAPModel
    history: pd.DataFrame
    gamma_stats: GammaStats
    best_epoch: int
    validation_fold: Optional[int]
    seed: int

    def metadata(self) -> dict:
        return {
            'gamma_stats': {'upsilon': self.gamma_stats.upsilon, 'zeta': self.gamma_stats.zeta},
            'best_epoch': self.best_epoch,
            'validation_fold': self.validation_fold,
            'seed': self.seed,
        }

    def final_metrics(self) -> Dict[str, float]:
        row = self.history[self.history['epoch'] == self.best_epoch].iloc[0]
        return {k: float(row[k]) for k in METRIC_COLUMNS if k != 'epoch'}


def _gather(data: TrainingData, batch: np.ndarray):
    """Unique clips of a batch plus the per-record rows into them."""
    s_unique, s_rows = np.unique(data.soundscape_index[batch], return_inverse=True)
    m_unique, m_rows = np.unique(data.masker_index[batch], return_inverse=True)
    return data.soundscapes[s_unique], data.maskers[m_unique], s_rows, m_rows


def evaluate(
    model: PPAPModel,
    data: TrainingData,
    indices: np.ndarray,
    gamma_stats: Optional[GammaStats] = None,
    batch_size: int = 64,
) -> Dict[str, float]:
    """MSE and MAE of mu against the labels, plus the mean NLL, in eval mode.

    Silent records are scored at ``gamma = upsilon`` when statistics are given.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise DataValidationError("Cannot evaluate on an empty index set")
    was_training = model.training
    model.eval()
    mus, log_sigmas = [], []
    with torch.no_grad():
        for start in range(0, indices.size, batch_size):
            batch = indices[start:start + batch_size]
            soundscapes, maskers, s_rows, m_rows = _gather(data, batch)
            gamma = data.gammas[batch].astype(np.float64)
            if gamma_stats is not None:
                gamma = np.where(data.silent[batch], gamma_stats.upsilon, gamma)
            pred = model.forward_indexed(soundscapes, maskers, s_rows, m_rows, gamma)
            mus.append(pred.mu)
            log_sigmas.append(pred.log_sigma)
    model.train(was_training)

    mu = torch.cat(mus)
    log_sigma = torch.cat(log_sigmas)
    labels = torch.as_tensor(data.labels[indices], dtype=mu.dtype)
    residual = labels - mu
    return {
        'mse': float(torch.mean(residual ** 2)),
        'mae': float(torch.mean(torch.abs(residual))),
        'nll': float(torch.mean(0.5 * (residual * torch.exp(-log_sigma)) ** 2 + log_sigma)),
    }


def train(
    data: TrainingData,
    validation_fold: Optional[int],
    config: ModelConfig,
    seed: int,
    lr: float = DEFAULT_LR,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    progress: bool = True,
) -> TrainingResult:
    """Train one model; ``validation_fold=None`` trains on every record and keeps the last epoch."""
    train_idx, val_idx = data.split(validation_fold)
    if train_idx.size == 0:
        raise DataValidationError(f"Holding out fold {validation_fold} leaves no training records")
    if validation_fold is not None and val_idx.size == 0:
        raise DataValidationError(f"Fold {validation_fold} has no records to validate on")

    gamma_stats = data.gamma_stats(train_idx)
    logger.info(
        f"Training {config.augmentation.value}+{config.attention.value} on {train_idx.size} records "
        f"(fold {validation_fold}, seed {seed}, upsilon={gamma_stats.upsilon:.3f}, zeta={gamma_stats.zeta:.3f})"
    )

    torch.manual_seed(seed)
    model = PPAPModel(config, seed)
    params = model.parameter_set()
    optimizer = numerics.AdamState(params, lr=lr)
    rng = np.random.default_rng(seed)

    rows = []
    best_state, best_epoch, best_nll = None, 0, float('inf')
    quiet = not progress or logger.getEffectiveLevel() > logging.INFO
    for epoch in tqdm(range(1, max_epochs + 1), desc=f"fold {validation_fold} seed {seed}", disable=quiet):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            soundscapes, maskers, s_rows, m_rows = _gather(data, batch)
            gamma = torch.as_tensor(data.gammas[batch], dtype=torch.float32)
            gamma = randomize_silent_gammas(gamma, data.silent[batch], gamma_stats, rng)
            pred = model.forward_indexed(soundscapes, maskers, s_rows, m_rows, gamma)
            loss = nll_loss(pred, data.labels[batch])
            if not torch.isfinite(loss):
                raise NumericalError(f"Non-finite training loss at epoch {epoch}; try a smaller learning rate")
            numerics.adam_step(optimizer, numerics.backward(loss, params))
            losses.append(loss.item() * batch.size)

        row = {'epoch': epoch, 'train_loss': sum(losses) / order.size,
               'val_mse': np.nan, 'val_mae': np.nan, 'val_nll': np.nan}
        if val_idx.size:
            metrics = evaluate(model, data, val_idx, gamma_stats)
            row.update(val_mse=metrics['mse'], val_mae=metrics['mae'], val_nll=metrics['nll'])
            if metrics['nll'] < best_nll:
                best_nll, best_epoch = metrics['nll'], epoch
                best_state = copy.deepcopy(model.state_dict())
        logger.debug(f"epoch {epoch}: {row}")
        rows.append(row)

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = max_epochs
    model.eval()
    history = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    return TrainingResult(model, history, gamma_stats, best_epoch, validation_fold, seed)


def save_training_artifacts(result: TrainingResult, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write ``weights.ppapw`` and ``metrics.csv``; both land atomically."""
    out_dir = Path(out_dir)
    weights_path = save_weights(out_dir / 'weights.ppapw', result.model, result.metadata())
    metrics_path = out_dir / 'metrics.csv'
    with atomic_path(metrics_path) as tmp:
        result.history.to_csv(tmp, index=False)
    return {'weights': weights_path, 'metrics': metrics_path}


def gamma_stats_from_metadata(metadata: dict) -> Optional[GammaStats]:
    stats = metadata.get('gamma_stats')
    if not stats:
        return None
    return GammaStats(float(stats['upsilon']), float(stats['zeta']))
