import json
import sys
from dataclasses import replace
from pathlib import Path

import psutil
import torch
from loguru import logger

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from virl.config import RunConfig, dump_config  # noqa: E402
from virl.encoder import EncoderConfig, expected_parameter_count  # noqa: E402

# float64 bytes per encoder parameter held during pretraining: weight, grad, two Adam moments
BYTES_PER_PARAMETER = 8 * 4


class VirlConfigOptimizer:
    """Suggest a RunConfig sized to this machine."""

    def __init__(self):
        self.config = None
        self.detect_hardware()

    def detect_hardware(self):
        self.cpu_count = psutil.cpu_count(logical=True) or 1
        self.cpu_physical = psutil.cpu_count(logical=False) or self.cpu_count
        self.total_memory_gb = psutil.virtual_memory().total / 1024 ** 3
        self.available_memory_gb = psutil.virtual_memory().available / 1024 ** 3
        logger.info(f'CPU: {self.cpu_physical} physical / {self.cpu_count} logical cores')
        logger.info(f'Memory: {self.total_memory_gb:.1f} GB total, {self.available_memory_gb:.1f} GB available')
        logger.info(f'torch {torch.__version__}, {torch.get_num_threads()} intra-op threads')

    def calculate_optimal_config(self) -> RunConfig:
        base = RunConfig()
        budget = self.available_memory_gb * 1024 ** 3 / 4
        hidden = 1024
        while hidden > 32:
            params = expected_parameter_count(EncoderConfig(hidden_width=hidden))
            if params * BYTES_PER_PARAMETER < budget:
                break
            hidden //= 2
        if self.total_memory_gb < 8:
            mode, batch, n_parts = 'low_memory', 16, 500
        elif self.total_memory_gb < 32:
            mode, batch, n_parts = 'balanced', 32, 2000
        else:
            mode, batch, n_parts = 'full', 64, 4000
        self.mode = mode
        self.config = replace(
            base, threads=max(1, self.cpu_physical),
            dataset=replace(base.dataset, n_parts=n_parts),
            encoder=replace(base.encoder, hidden_width=hidden),
            pretrain=replace(base.pretrain, batch_size=batch))
        logger.info(f'Mode {mode}: hidden width {hidden}, batch {batch}, {n_parts} parts, '
                    f'{self.config.threads} threads')
        return self.config

    def save_config(self, path: Path) -> Path:
        path.write_text(dump_config(self.config), encoding='utf-8')
        logger.info(f'Suggested config written to {path}')
        return path


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / 'auto_config.json'
    optimizer = VirlConfigOptimizer()
    optimizer.calculate_optimal_config()
    optimizer.save_config(out)
    print(json.dumps({'mode': optimizer.mode, 'config': str(out)}))


if __name__ == '__main__':
    main()
