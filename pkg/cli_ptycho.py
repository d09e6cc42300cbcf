import argparse
import json
import logging
import os
import signal
import sys

from ptycho_ad.Pipeline import runEvaluate, runProfile, runReconstruct, runSimulate
from ptycho_ad.const import LOG_LEVEL_ENV
from ptycho_ad.errors import PtychoError


def _point(text: str):
    try:
        x, y = (float(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y but got '{text}'")
    return (x, y)


def _errorExit(kind: str, error: str):
    print(json.dumps({"type": "Error", "data": {"kind": kind, "error": error}}), file=sys.stderr)
    sys.exit(1)


def main():

    parser = argparse.ArgumentParser(prog='ptycho-ad')
    subparsers = parser.add_subparsers(dest='command', required=True)

    simParser = subparsers.add_parser('simulate', help="Synthesize a dataset and its ground truth")
    simParser.add_argument('--recipe', default=None, help="Run configuration with a `recipe` section")
    simParser.add_argument('--out', required=True)

    reconParser = subparsers.add_parser('reconstruct', help="Reconstruct object, probe, distance and positions")
    reconParser.add_argument('--data', required=True, help="Dataset manifest (.yaml)")
    reconParser.add_argument('--config', default=None, help="Run configuration with a `reconstruction` section")
    reconParser.add_argument('--out', required=True)
    reconParser.add_argument('--resume', default=None, help="snapshot.npz to continue from")
    reconParser.add_argument('--truth', default=None, help="Ground-truth sidecar for per-epoch metrics")
    reconParser.add_argument('--monitorWsHost', default=None, help="If monitorWsHost and monitorWsPort are specified, enable the Monitor Websocket")
    reconParser.add_argument('--monitorWsPort', default=None, type=int, help="If monitorWsHost and monitorWsPort are specified, enable the Monitor Websocket")

    evalParser = subparsers.add_parser('evaluate', help="Compare a reconstruction with the ground truth")
    evalParser.add_argument('--recon', required=True, help="Reconstruction output directory")
    evalParser.add_argument('--truth', required=True)
    evalParser.add_argument('--out', required=True)

    profileParser = subparsers.add_parser('profile', help="Line profile and its width")
    profileParser.add_argument('--image', required=True)
    profileParser.add_argument('--from', dest='p0', required=True, type=_point, help="x,y")
    profileParser.add_argument('--to', dest='p1', required=True, type=_point, help="x,y")
    profileParser.add_argument('--samples', default=None, type=int)
    profileParser.add_argument('--out', default=None)

    args = parser.parse_args()

    logging.basicConfig(
        level=os.environ.get(LOG_LEVEL_ENV, 'INFO').upper(),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    try:
        if args.command == 'simulate':
            runSimulate(args.recipe, args.out)

        elif args.command == 'reconstruct':

            ###
            # Status Callbacks

            def statusCb(msg):
                if msg['type'] == "Checkpoint":
                    print(f"checkpoint {msg['data']['epoch']}", flush=True)

            def reconstructorCb(reconstructor):
                def sig_handler(sig=None, frame=None):
                    reconstructor.stop()

                signal.signal(signal.SIGINT, sig_handler)
                signal.signal(signal.SIGTERM, sig_handler)

            ###
            # Run

            runReconstruct(
                args.data,
                args.config,
                args.out,
                resumePath=args.resume,
                truthPath=args.truth,
                monitorWsHost=args.monitorWsHost,
                monitorWsPort=args.monitorWsPort,
                reconstructorCb=reconstructorCb,
                statusCb=statusCb,
            )

        elif args.command == 'evaluate':
            evaluation = runEvaluate(args.recon, args.truth, args.out)
            print(json.dumps(evaluation, default=float))

        elif args.command == 'profile':
            _, text = runProfile(args.image, args.p0, args.p1, args.samples, args.out)
            if not args.out:
                sys.stdout.write(text)

    except PtychoError as e:
        _errorExit(type(e).__name__, str(e))
    except OSError as e:
        _errorExit('OSError', str(e))


if __name__ == '__main__':
    main()
