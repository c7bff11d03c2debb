from .checkpoint import Checkpoint, file_sha256, load_checkpoint, save_checkpoint, state_checksum
from .loops import (
    evaluate_diagnosis,
    evaluate_signs,
    finetune_diagnosis,
    pretrain_signs,
    train_scratch_baseline,
)
from .optim import Hyperparams, MomentumSGD, lr_at, sgd_update
