"""Single-transformer multimodal understanding and generation at desk scale."""
from .adaln import AdaLNLayer, StateMatrix, TimeEmbedding, multimodal_adaln, single_expert_adaln
from .block import BlockConfig, HaploBlock, KVCache, block_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .connectors import Connector, PreScaler, apply_prescaler, calibrate_prescaler, connector_forward
from .data import PairDataset, SyntheticDataset, generate_synthetic
from .diffusion import NoiseSchedule, ddim_step, diffusion_loss, forward_noise, sample
from .estimator import HaploOmni
from .language import VOCAB, decode, ntp_loss, top_p_filter
from .masking import AttentionMask, TokenType, TokenTypeSequence, build_mask
from .model import ModelBundle, ModelConfig, generation_plan, understanding_plan
from .training import STAGES, StagePlan, default_plan, run_stage

__version__ = "0.1.0"
