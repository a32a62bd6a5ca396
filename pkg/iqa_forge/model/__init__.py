# iqa_forge/model/__init__.py

from iqa_forge.model.checkpoint import ModelCheckpoint
from iqa_forge.model.features import FEATURE_DIM, FEATURE_VERSION, FeatureCache, FeatureScaler, extract_features
from iqa_forge.model.optim import OptimizerState, onecycle_lr, optimizer_step
from iqa_forge.model.regressor import (
    MlpRegressor,
    Mode,
    class_weights,
    quality_level,
    sample_weights,
    weighted_mse_loss,
)
