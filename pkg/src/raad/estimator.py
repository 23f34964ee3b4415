"""scikit-learn style estimator wrapping the full pipeline in memory.

``fit`` consumes normal-only images and runs pretraining, joint
distillation, discrepancy-scored quantization and recalibration;
``score_samples`` returns anomaly scores (higher means more anomalous).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .maps import AnomalyMap, model_maps
from .networks import build_autoencoder, build_extractor, build_pdn, encoder_conv_indices
from .quantization import (build_pair_calibration, build_uniform_calibration,
                           quantize_network, select_calibration_images)
from .rng import derive
from .scoring import BitPolicy, score_network_pair
from .training import TrainConfig, pretrain_teacher, train
from .validation import check_images


class RaadDetector(BaseEstimator):
    """Unsupervised image anomaly detector with quantized attention recalibration.

    Parameters mirror the pipeline configuration; all are stored verbatim
    so ``get_params``/``set_params``/``clone`` behave as sklearn expects.
    """

    def __init__(self, image_size=64, teacher_channels=16, hidden_channels=16,
                 ae_hidden_channels=16, latent_dim=16,
                 pretrain_iterations=3000, pretrain_lr=1e-3,
                 train_iterations=2000, finetune_iterations=1500, lr=5e-4,
                 lambda_ts=1.0, lambda_aes=1.0, lambda_tae=1.0,
                 hard_fraction=0.1, calibration_size=32,
                 bit_thresholds=(0.25, 0.5, 0.75), quantize=True, finetune=True,
                 threshold_quantile=0.995, random_state=0):
        self.image_size = image_size
        self.teacher_channels = teacher_channels
        self.hidden_channels = hidden_channels
        self.ae_hidden_channels = ae_hidden_channels
        self.latent_dim = latent_dim
        self.pretrain_iterations = pretrain_iterations
        self.pretrain_lr = pretrain_lr
        self.train_iterations = train_iterations
        self.finetune_iterations = finetune_iterations
        self.lr = lr
        self.lambda_ts = lambda_ts
        self.lambda_aes = lambda_aes
        self.lambda_tae = lambda_tae
        self.hard_fraction = hard_fraction
        self.calibration_size = calibration_size
        self.bit_thresholds = bit_thresholds
        self.quantize = quantize
        self.finetune = finetune
        self.threshold_quantile = threshold_quantile
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X, self.image_size)
        seed = self.random_state
        images = list(X)

        teacher = build_pdn("teacher", seed=derive(seed, 1),
                            out_channels=self.teacher_channels,
                            hidden_channels=self.hidden_channels)
        student = build_pdn("student", seed=derive(seed, 2),
                            out_channels=self.teacher_channels, width_multiplier=2,
                            hidden_channels=self.hidden_channels)
        autoencoder = build_autoencoder("autoencoder", seed=derive(seed, 3),
                                        out_channels=self.teacher_channels,
                                        latent_dim=self.latent_dim,
                                        image_size=self.image_size,
                                        hidden_channels=self.ae_hidden_channels)
        extractor = build_extractor("extractor", seed=derive(seed, 4),
                                    out_channels=self.teacher_channels,
                                    hidden_channels=self.hidden_channels)

        pretrain_teacher(teacher, extractor, images,
                         TrainConfig(lr=self.pretrain_lr,
                                     iterations=self.pretrain_iterations,
                                     seed=derive(seed, 10)))
        teacher.freeze()
        tcfg = TrainConfig(lambda_ts=self.lambda_ts, lambda_aes=self.lambda_aes,
                           lambda_tae=self.lambda_tae, lr=self.lr,
                           iterations=self.train_iterations,
                           hard_fraction=self.hard_fraction, seed=derive(seed, 11))
        train(teacher, student, autoencoder, images, tcfg)

        self.layer_scores_ = None
        self.bit_assignment_ = None
        if self.quantize:
            calib = select_calibration_images(images, self.calibration_size,
                                              derive(seed, 12))
            policy = BitPolicy(thresholds=tuple(self.bit_thresholds),
                               forced_layers=frozenset({1, teacher.n_convs}))
            scores = score_network_pair(teacher, student, calib, policy)
            self.layer_scores_ = scores
            self.bit_assignment_ = [s.bits for s in scores]
            t_cal, s_cal = build_pair_calibration(teacher, student, calib)
            a_cal = build_uniform_calibration(autoencoder, calib)
            teacher, _, _ = quantize_network(teacher, t_cal, self.bit_assignment_)
            student, _, _ = quantize_network(student, s_cal, self.bit_assignment_)
            autoencoder, _, _ = quantize_network(
                autoencoder, a_cal, [8] * autoencoder.n_convs,
                act_layers=encoder_conv_indices(autoencoder))
            # recalibration runs on snapped weights in full precision
            for net in (teacher, student, autoencoder):
                net.act_transforms = None
            teacher.freeze()
            if self.finetune:
                fcfg = TrainConfig(lambda_ts=self.lambda_ts, lambda_aes=self.lambda_aes,
                                   lambda_tae=self.lambda_tae, lr=self.lr,
                                   iterations=self.finetune_iterations,
                                   hard_fraction=self.hard_fraction,
                                   seed=derive(seed, 13))
                train(teacher, student, autoencoder, images, fcfg)

        self.teacher_ = teacher
        self.student_ = student
        self.autoencoder_ = autoencoder
        train_scores = self._scores(images)
        self.threshold_ = float(np.quantile(train_scores, self.threshold_quantile))
        return self

    def _check_fitted(self):
        if not hasattr(self, "teacher_"):
            raise NotFittedError("this RaadDetector instance is not fitted yet")

    def _maps(self, images) -> list[AnomalyMap]:
        return [model_maps(self.teacher_, self.student_, self.autoencoder_, im)
                for im in images]

    def _scores(self, images) -> np.ndarray:
        return np.array([m.image_score for m in self._maps(images)])

    def anomaly_maps(self, X) -> list[AnomalyMap]:
        """Per-image heatmaps at input resolution."""
        self._check_fitted()
        return self._maps(list(check_images(X, self.image_size)))

    def score_samples(self, X) -> np.ndarray:
        """Anomaly score per image; larger means more anomalous."""
        self._check_fitted()
        return self._scores(list(check_images(X, self.image_size)))

    def decision_function(self, X) -> np.ndarray:
        """Signed distance from the fitted normal-score threshold."""
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        """1 for anomalous, 0 for normal."""
        return (self.decision_function(X) > 0.0).astype(int)
