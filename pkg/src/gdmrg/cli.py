"""
gdmrg 명령행 진입점

사용법:
    gdmrg gen-data --config src/train/gdmrg_desk.yaml
    gdmrg train --config src/train/gdmrg_desk.yaml --phi 70 --aux-loss asl
    gdmrg evaluate --config src/train/gdmrg_desk.yaml --show-prompt --dump-attention
    gdmrg sweep-phi --config src/train/gdmrg_desk.yaml --phis 50,70,90
    gdmrg ablate --config src/train/gdmrg_desk.yaml --axis losses
    gdmrg viz-topology --config src/train/gdmrg_desk.yaml --sim-slice all
    gdmrg gradcheck --seeds 20

RunConfig 의 모든 키는 `--key value` 로 덮어쓸 수 있습니다 (dash / underscore 모두 허용).
종료 코드: 0 성공, 1 gradcheck 실패, 2 설정 오류, 3 데이터 오류.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import Sequence

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, DataError

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

DEFAULT_PHIS = "50,60,70,80,90"


def _config_arguments() -> argparse.ArgumentParser:
    """RunConfig 필드마다 --key 플래그를 만든다. 주어진 플래그만 namespace 에 남는다."""
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument("--config", default=None, help="flat YAML 설정 파일 (예: src/train/gdmrg_desk.yaml)")
    group = parent.add_argument_group("config", "RunConfig 덮어쓰기 (파일보다 우선)")
    for f in fields(RunConfig):
        flags = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            flags.append(f"--{f.name}")
        help_text = f.metadata.get("doc") or None
        if isinstance(f.default, bool):
            group.add_argument(*flags, dest=f.name, nargs="?", const=True, default=argparse.SUPPRESS, help=help_text)
            negated = f.name[4:] if f.name.startswith("use_") else f.name
            group.add_argument(
                f"--no-{negated.replace('_', '-')}", dest=f.name, action="store_const", const=False,
                default=argparse.SUPPRESS, help=argparse.SUPPRESS,
            )
        else:
            group.add_argument(*flags, dest=f.name, default=argparse.SUPPRESS, help=help_text)
    group.add_argument(
        "--no-tki", dest="graph_mode", action="store_const", const="none", default=argparse.SUPPRESS,
        help="graph_mode=none 과 같음 (TKI 제거 ablation)",
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _config_arguments()
    parser = argparse.ArgumentParser(prog="gdmrg", description="그래프 기반 dual-stream 판독문 생성 (합성 데이터)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text, allow_abbrev=False)

    add("gen-data", "합성 train/val/test split 생성")

    p = add("train", "2단계 학습 (classifier warm-up 후 joint)")
    p.add_argument("--run-dir", default=None, help="체크포인트와 로그 저장 위치 (기본: out_dir)")

    p = add("evaluate", "val 에서 OTS, test 에서 지표 계산과 판독문 생성")
    p.add_argument("--run-dir", default=None, help="학습된 run 디렉토리 (기본: out_dir)")
    p.add_argument("--out", default=None, help="평가 산출물 위치 (기본: run 디렉토리)")

    p = add("sweep-phi", "phi 민감도 분석")
    p.add_argument("--phis", default=DEFAULT_PHIS, help=f"쉼표로 구분한 percentile 목록 (기본: {DEFAULT_PHIS})")

    p = add("ablate", "ablation 표 생성")
    p.add_argument("--axis", required=True, choices=pipeline.ABLATION_AXES)

    p = add("viz-topology", "M, M', A, Ã 와 W 유사도 행렬 덤프")
    p.add_argument("--run-dir", default=None, help="체크포인트가 있는 run 디렉토리 (기본: out_dir)")
    p.add_argument("--sim-slice", default="pos", choices=pipeline.SIM_SLICES, help="W 유사도에 쓸 state slice")

    p = add("gradcheck", "모든 미분 경로의 finite-difference 검사")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=3, help="파라미터 텐서당 검사할 원소 수")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}


def parse_phis(text: str) -> list[float]:
    try:
        phis = [float(tok) for tok in text.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"--phis: bad value {text!r} ({e})") from e
    if not phis:
        raise ConfigError("--phis: at least one value is required")
    bad = [p for p in phis if not 0.0 <= p < 100.0]
    if bad:
        raise ConfigError(f"--phis: values must be in [0, 100), got {bad}")
    return phis


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, overrides_from_args(args))
    cmd = args.command
    if cmd == "gen-data":
        pipeline.gen_data(cfg)
    elif cmd == "train":
        pipeline.train(cfg, run_dir=args.run_dir)
    elif cmd == "evaluate":
        pipeline.evaluate(cfg, args.run_dir, args.out)
    elif cmd == "sweep-phi":
        pipeline.sweep_phi(cfg, parse_phis(args.phis))
    elif cmd == "ablate":
        pipeline.ablate(cfg, args.axis)
    elif cmd == "viz-topology":
        pipeline.viz_topology(cfg, args.run_dir, args.sim_slice)
    elif cmd == "gradcheck":
        table = pipeline.gradcheck(cfg, seeds=args.seeds, max_entries=args.max_entries, tol=args.tol)
        failed = table[~table["passed"]]
        if not failed.empty:
            print(f"[FAIL] {len(failed)}/{len(table)} 검사 실패 (tol={args.tol:g})")
            print(failed.to_markdown(index=False, floatfmt=".2e"))
            return EXIT_GRADCHECK
        print(f"[OK] {len(table)}개 검사 통과 (tol={args.tol:g})")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"[ERROR] 설정 오류: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"[ERROR] 데이터 오류: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
