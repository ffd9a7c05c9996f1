import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

class Config:
    """Experiment defaults, overridable through the environment"""

    # Runtime settings
    THREADS = int(os.environ.get('LIA_THREADS', '1'))
    SEED = int(os.environ.get('LIA_SEED', '0'))
    RUNS_DIR = os.environ.get('LIA_RUNS_DIR', 'runs')
    LOG_LEVEL = os.environ.get('LIA_LOG_LEVEL', 'INFO')

    # Model dimensions (desk scale)
    LATENT_DIM = int(os.environ.get('LIA_LATENT_DIM', '16'))
    HIDDEN = int(os.environ.get('LIA_HIDDEN', '128'))
    DEPTH = 3  # linear layers per network
    COUPLING_LAYERS = 8
    FEATURE_HIDDEN = 64
    FEATURE_DIM = 32

    # Training settings
    BATCH_SIZE = int(os.environ.get('LIA_BATCH_SIZE', '64'))
    STAGE1_STEPS_2D = 3000
    STAGE1_STEPS_SHAPES = 10000
    STAGE2_STEPS = int(os.environ.get('LIA_STAGE2_STEPS', '5000'))
    LEARNING_RATE = float(os.environ.get('LIA_LEARNING_RATE', '1e-3'))
    ENCODER_LEARNING_RATE = float(os.environ.get('LIA_ENCODER_LEARNING_RATE', '1e-4'))
    ADAM_BETAS = (0.0, 0.99)
    ADAM_EPS = 1e-8
    FINETUNE_RATIO = 0.1  # Stage-2 critic learning rate = lr_d * ratio
    STAGE2_LR_FLOOR = 0.1  # Stage-2 learning rates decay linearly to this fraction
    ENCODER_WARMUP_STEPS = int(os.environ.get('LIA_ENCODER_WARMUP_STEPS', '2000'))
    LOG_EVERY = int(os.environ.get('LIA_LOG_EVERY', '10'))
    FEATURE_PRETRAIN_STEPS = 2000

    # Path-length regularization of g in Stage 1 (image data only)
    PATH_LENGTH_WEIGHT = 2.0
    PATH_LENGTH_EVERY = 4
    PATH_LENGTH_DECAY = 0.01

    # Loss weights
    GAMMA = 10.0
    BETA1 = 5e-5
    BETA2 = 0.1

    # Datasets
    SHAPES_SAMPLES = 10000
    SHAPES_OUTPUT_SCALE = 1.1  # pixels span [-1, 1]; keeps the tanh head out of saturation
    GAUSSIAN_SAMPLES = 20000
    GAUSSIAN_MODES = 8
    GAUSSIAN_RADIUS = 2.0
    GAUSSIAN_SIGMA = 0.02
    HELDOUT_FRACTION = 0.1

    # Inversion
    INVERSION_LR = 0.05
    INVERSION_STEPS = 200
    INVERSION_BETAS = (0.9, 0.999)
    ROLLBACK_PATIENCE = 10

    # Metrics
    METRIC_SAMPLES = int(os.environ.get('LIA_METRIC_SAMPLES', '2000'))
    SWD_PROJECTIONS = 128
    PATH_EPS = 1e-2
    METRIC_CHUNK = 256
