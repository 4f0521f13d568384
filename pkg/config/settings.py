# -*- coding: utf-8 -*-
"""
配置文件
定义量化引擎的所有常量和默认参数
"""

# 文件格式配置
MODEL_MANIFEST_SUFFIX = ".eptq.json"
MODEL_BLOB_SUFFIX = ".eptq.bin"
MODEL_BLOB_MAGIC = b"EPTQW001"
DATASET_SUFFIX = ".eptqd"
DATASET_MAGIC = b"EPTQD001"
MODEL_FORMAT_NAME = "eptq-model"
MODEL_FORMAT_VERSION = 1

# 输出文件
METRICS_FILE = "metrics.json"
TRAIN_LOG_FILE = "train_log.jsonl"
QUANTIZED_MODEL_STEM = "quantized"
HESSIAN_REPORT_FILE = "hessian_report.json"
EVALUATION_FILE = "evaluation.json"

# 位宽配置
FLOAT_BITS = 32  # 32 表示不量化
MIN_BITS = 2
MAX_BITS = 16
EDGE_LAYER_BITS = 8  # 首尾带权层固定 8 位
DEFAULT_WEIGHT_BITS = 4
DEFAULT_ACTIVATION_BITS = 8

# 软舍入 (rectified sigmoid)
SOFT_ROUNDING_GAMMA = -0.1
SOFT_ROUNDING_ZETA = 1.1
ROUNDING_UNDECIDED_LOW = 0.01
ROUNDING_UNDECIDED_HIGH = 0.99

# 阈值搜索
THRESHOLD_GRID_STEPS = 96
THRESHOLD_GRID_DENOMINATOR = 128
ZERO_CHANNEL_THRESHOLD = 1e-8
DEGENERATE_RANGE_WIDTH = 1e-6

# Hessian 估计
HUTCHINSON_PROBES = 50
HMSE_SAMPLES = 64
PROBE_DISTRIBUTIONS = ["gaussian", "rademacher"]
FINITE_DIFF_MAX_ELEMENTS = 512
FINITE_DIFF_STEP = 1e-5
GAUSSIAN_NLL_VARIANCE = 1.0

# 优化器 (RAdam 默认参数)
LEARNING_RATE = 0.01
RADAM_BETAS = (0.9, 0.999)
RADAM_EPS = 1e-8
LAMBDA_REG = 10.0
BETA_START = 20.0
BETA_END = 2.0
WARMUP_FRACTION = 0.2
INITIAL_FLOAT_FRACTION = 1.0  # P0
ITERATIONS = 2000
BATCH_SIZE = 16
CALIBRATION_SAMPLES = 256
DEFAULT_SEED = 0
LOG_EVERY = 100

GRADUAL_MODES = ["none", "stochastic", "linear"]
SLA_MODES = ["sla", "average"]
THRESHOLD_METRICS = ["mse", "hmse"]
LOSS_KINDS = ["mse", "ce_softmax", "bce_sigmoid", "gaussian_nll", "poisson_nll"]
