import os
from dataclasses import replace

from dotenv import load_dotenv

load_dotenv()
project_root = os.path.dirname(os.path.abspath(__file__))
data_root = os.getenv('VIRL_DATA_ROOT', os.path.join(project_root, 'runs'))
print(f'Runs will be saved to: {data_root}')

import gradio as gr

from virl.config import RunConfig, load_config, with_overrides
from virl.do_everything import (do_everything, run_adapt, run_embed, run_gen, run_pretrain, run_reconstruct,
                                run_report, run_sweep)
from virl.downstream import NORMALIZATIONS, STRATEGIES
from virl.errors import VirlError
from virl.synth import LABEL_COLUMNS
from virl.utils import OutputLock, read_csv

DEFAULT_OUT = os.path.join(data_root, 'default')
DEFAULT_CONFIG = os.path.join(project_root, 'config', 'smoke.json')


def _config(config_path, out, seed, threads) -> RunConfig:
    config = load_config(config_path) if config_path else RunConfig()
    return with_overrides(config, int(seed) if seed is not None else None, out or None, int(threads))


def _guarded(step, config: RunConfig, *args) -> str:
    try:
        with OutputLock(config.out):
            return step(config, *args)
    except VirlError as e:
        return f'{type(e).__name__}: {e}'


def gen(config_path, out, seed, threads, n_parts):
    config = _config(config_path, out, seed, threads)
    config = replace(config, dataset=replace(config.dataset, n_parts=int(n_parts)))
    return _guarded(run_gen, config)


def pretrain(config_path, out, seed, threads, until):
    config = _config(config_path, out, seed, threads)
    return _guarded(run_pretrain, config, int(until) or None)


def adapt(config_path, out, seed, threads, task, strategy, normalization, shots):
    config = _config(config_path, out, seed, threads)
    try:
        config = replace(config, adapt=replace(config.adapt, task=task, strategy=strategy,
                                               normalization=normalization, shots=int(shots)))
    except VirlError as e:
        return f'{type(e).__name__}: {e}'
    return _guarded(run_adapt, config)


def report(config_path, out, seed, threads, strategies, include_oracle):
    config = _config(config_path, out, seed, threads)
    config = replace(config, report=replace(config.report, strategies=tuple(strategies),
                                            include_oracle=include_oracle))
    return _guarded(run_report, config)


def reconstruct(config_path, out, seed, threads, part_ids):
    config = _config(config_path, out, seed, threads)
    ids = [p.strip() for p in part_ids.split(',') if p.strip()]
    return _guarded(run_reconstruct, config, ids)


def sweep(config_path, out, seed, threads):
    return _guarded(run_sweep, _config(config_path, out, seed, threads))


def embed(config_path, out, seed, threads, color):
    config = _config(config_path, out, seed, threads)
    path = _guarded(run_embed, config)
    if not os.path.exists(path):
        return path, None
    rows = read_csv(path)
    data = {'pc1': [float(r['pc1']) for r in rows], 'pc2': [float(r['pc2']) for r in rows],
            color: [float(r[color]) for r in rows]}
    return path, data


def everything(config_path, out, seed, threads):
    return _guarded(do_everything, _config(config_path, out, seed, threads))


def _common():
    return [
        gr.Textbox(label='Config JSON', value=DEFAULT_CONFIG),
        gr.Textbox(label='Output Folder', value=DEFAULT_OUT),
        gr.Number(label='Seed', value=0, precision=0),
        gr.Slider(minimum=1, maximum=64, step=1, label='Threads', value=1),
    ]


do_everything_interface = gr.Interface(fn=everything, inputs=_common(), outputs='text')

gen_interface = gr.Interface(
    fn=gen,
    inputs=_common() + [gr.Slider(minimum=4, maximum=10000, step=1, label='Number of parts', value=64)],
    outputs='text',
)

pretrain_interface = gr.Interface(
    fn=pretrain,
    inputs=_common() + [gr.Number(label='Stop at step (0 = full schedule)', value=0, precision=0)],
    outputs='text',
)

adapt_interface = gr.Interface(
    fn=adapt,
    inputs=_common() + [
        gr.Dropdown(list(LABEL_COLUMNS), label='Task', value='am_time'),
        gr.Dropdown([s for s in STRATEGIES if s != 'oracle'] + ['lora-8'], label='Strategy', value='probe-mlp'),
        gr.Radio(list(NORMALIZATIONS), label='Normalization', value='static'),
        gr.Slider(minimum=2, maximum=4000, step=1, label='Shots', value=100),
    ],
    outputs='text',
)

report_interface = gr.Interface(
    fn=report,
    inputs=_common() + [
        gr.CheckboxGroup([s for s in STRATEGIES if s != 'oracle'], label='Strategies', value=['probe-mlp', 'scratch']),
        gr.Checkbox(label='Include oracle ceiling', value=True),
    ],
    outputs='text',
)

reconstruct_interface = gr.Interface(
    fn=reconstruct,
    inputs=_common() + [gr.Textbox(label='Part ids (comma separated, empty = all)', value='')],
    outputs='text',
)

sweep_interface = gr.Interface(fn=sweep, inputs=_common(), outputs='text')

embed_interface = gr.Interface(
    fn=embed,
    inputs=_common() + [gr.Dropdown(list(LABEL_COLUMNS), label='Color by', value='am_time')],
    outputs=['text', gr.JSON(label='Coordinates')],
)

app = gr.TabbedInterface(
    interface_list=[do_everything_interface, gen_interface, pretrain_interface, adapt_interface, report_interface,
                    reconstruct_interface, sweep_interface, embed_interface],
    tab_names=['All steps', 'Dataset', 'Pretrain', 'Adapt', 'Report', 'Reconstruct', 'Sweep', 'Embed'],
    title='VIRL')
if __name__ == '__main__':
    app.launch()
