"""Command-line entry point: synth, train, eval, profile, viz and serve."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from spikeflow import formats
from spikeflow.config import RunConfig, load_config
from spikeflow.data import FlowDataset, save_dataset, save_scene
from spikeflow.errors import DataError, SpikeFlowError
from spikeflow.metrics import NPE_THRESHOLDS, format_report, improvement_percent
from spikeflow.profiler import profile
from spikeflow.synth import PATTERNS, synth_dataset, synth_scene
from spikeflow.trainer import Checkpoint, evaluate, fit
from spikeflow.viz import flow_to_rgb

logger = logging.getLogger('spikeflow')


def _echo(pairs: Iterable[Tuple[str, object]]):
    """Print the resolved settings of a run as commented key=value lines."""
    for key, value in pairs:
        print(f'# {key}={value}')


def cmd_synth(args) -> int:
    height, width = args.size
    _echo([('pattern', args.pattern), ('velocity', ' '.join(map(str, args.velocity))),
           ('size', f'{height} {width}'), ('rate', args.rate), ('theta', args.theta),
           ('rotation', args.rotation), ('contrast', args.contrast), ('seed', args.seed),
           ('count', args.count), ('out', args.out)])
    if args.count > 1:
        scenes = synth_dataset(args.count, (height, width), args.seed, args.theta)
        save_dataset(scenes, args.out)
        print(f'scenes={len(scenes)}')
        print(f'events={sum(len(s.stream) for s in scenes)}')
        return 0
    scene = synth_scene(args.pattern, tuple(args.velocity), height, width, args.rate, args.theta,
                        args.seed, args.contrast, args.rotation)
    if len(scene.stream) == 0:
        logger.warning("static scene: the event stream is empty")
    for path in save_scene(scene, args.out, 0):
        logger.debug("wrote %s", path)
    print(f'events={len(scene.stream)}')
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else RunConfig.ssl_defaults()
    resume = Checkpoint.load(args.resume) if args.resume else None
    _echo(config.items())
    dataset = FlowDataset.load(args.data, config.model.timesteps)
    checkpoint, records = fit(dataset, config.model, config.train, config.loss, config.lif,
                              config.seed, args.out, resume)
    print(f'epochs={checkpoint.epoch}')
    if records:
        print(f'loss={records[-1]["loss"]:.6g}')
    print(f'checkpoint={Path(args.out) / "final.ckpt"}')
    return 0


def _metrics(checkpoint: Checkpoint, data: str) -> dict:
    network = checkpoint.build()
    dataset = FlowDataset.load(data, checkpoint.spec.timesteps)
    if not dataset.has_flow:
        raise DataError(f"{data}: evaluation needs ground-truth flow files")
    record = evaluate(network, dataset)
    if record is None:
        raise DataError(f"{data}: no sample contains events")
    return record


def cmd_eval(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    _echo([('checkpoint', args.checkpoint), ('data', args.data), ('baseline', args.baseline)]
          + list(checkpoint.manifest().items()))
    record = _metrics(checkpoint, args.data)
    keys = ['aee'] + [f'{n}pe' for n in NPE_THRESHOLDS] + ['pixels']
    if args.baseline:
        baseline = _metrics(Checkpoint.load(args.baseline), args.data)
        record['baseline_aee'] = baseline['aee']
        record['improvement_percent'] = improvement_percent(baseline['aee'], record['aee'])
        keys += ['baseline_aee', 'improvement_percent']
    print(format_report(record, keys))
    return 0


def cmd_profile(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    _echo([('checkpoint', args.checkpoint), ('data', args.data), ('reference', args.reference)]
          + list(checkpoint.manifest().items()))
    network = checkpoint.build()
    dataset = FlowDataset.load(args.data, checkpoint.spec.timesteps)
    report = profile(network, [s.frames for s in dataset.samples], args.reference)
    print(report.to_table())
    return 0


def cmd_viz(args) -> int:
    _echo([('flow', args.flow), ('out', args.out), ('scale', args.scale)])
    flow = formats.read_flow(args.flow)
    formats.write_ppm(flow_to_rgb(flow, args.scale), args.out)
    print(f'image={args.out}')
    return 0


def cmd_serve(args) -> int:
    from spikeflow import create_app

    _echo([('host', args.host), ('port', args.port), ('checkpoint', args.checkpoint),
           ('data', args.data)])
    app = create_app(checkpoint=args.checkpoint, data=args.data)
    app.run(host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='spikeflow',
                                     description='Spiking optical flow from event cameras.')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='render a synthetic moving-pattern scene')
    p.add_argument('--pattern', choices=PATTERNS, default='bar')
    p.add_argument('--velocity', type=float, nargs=2, metavar=('U', 'V'), default=(2.0, 0.0),
                   help='pixels per frame interval')
    p.add_argument('--size', type=int, nargs=2, metavar=('H', 'W'), default=(64, 64))
    p.add_argument('--rate', type=float, default=0.0, help='background noise events per pixel per second')
    p.add_argument('--theta', type=float, default=0.2, help='log-intensity contrast threshold')
    p.add_argument('--rotation', type=float, default=0.0, help='radians per frame interval')
    p.add_argument('--contrast', type=float, default=0.6)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--count', type=int, default=1, help='random scenes to generate (>1 ignores the motion flags)')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('train', help='train a network on a scene directory')
    p.add_argument('--config', help='key=value configuration file')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True, help='directory for checkpoints and the training log')
    p.add_argument('--resume', help='checkpoint to continue from')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='AEE and 1/2/3PE of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--baseline', help='checkpoint to report an AEE improvement against')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('profile', help='operation counts and energy of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--reference', type=float, help='reference energy in mJ for the improvement column')
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser('viz', help='render a flow file as a colour-wheel image')
    p.add_argument('--flow', required=True)
    p.add_argument('--out', required=True, help='output .ppm path')
    p.add_argument('--scale', type=float, default=40.0, help='flow magnitude at full saturation')
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser('serve', help='start the JSON report server')
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--port', type=int, default=5000)
    p.add_argument('--checkpoint')
    p.add_argument('--data')
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except SpikeFlowError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return DataError.exit_code


if __name__ == '__main__':
    sys.exit(main())
