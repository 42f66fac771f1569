"""
科學工作流程溯源帳本主程序
"""
import argparse
import logging
import sys
from typing import List, Optional

from ledgerflow import Config, LedgerService
from ledgerflow.utils.logger import set_log_level, setup_logger


def build_parser() -> argparse.ArgumentParser:
    """建立命令列解析器"""
    parser = argparse.ArgumentParser(description='科學工作流程溯源帳本')
    parser.add_argument(
        '--data-dir',
        type=str,
        help='資料目錄（預設讀取 LEDGERFLOW_DATA_DIR）'
    )
    parser.add_argument(
        '--seed',
        type=int,
        help='模擬網路的亂數種子'
    )
    parser.add_argument(
        '--batch-size',
        type=int,
        help='自動封存的待封存交易數'
    )
    parser.add_argument(
        '--peers',
        type=int,
        help='預先建立的節點數'
    )
    parser.add_argument(
        '--porcelain',
        action='store_true',
        help='以正規序列化輸出，方便腳本處理'
    )
    parser.add_argument(
        '--config',
        type=str,
        help='.env 配置文件路徑'
    )
    parser.add_argument(
        '--log-level',
        type=str,
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        default='WARNING',
        help='日誌級別'
    )

    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='執行工作負載腳本')
    run.add_argument('script', help='腳本路徑')

    verify = commands.add_parser('verify', help='驗證帳本檔案')
    verify.add_argument('ledger', nargs='?', help='帳本檔案，預設為 --peer 的帳本')
    verify.add_argument('--registry', help='登錄表檔案')
    verify.add_argument('--peer', default='peer0')

    query = commands.add_parser('query', help='查詢交易')
    query.add_argument('expression', nargs='*', help='例如 contract=workflow_execution from=peer0')
    query.add_argument('--peer', default='peer0')

    walk = commands.add_parser('walk', help='依時間方向走訪交易')
    walk.add_argument('direction', choices=['forward', 'backward'])
    walk.add_argument('expression', nargs='*')
    walk.add_argument('--peer', default='peer0')

    lineage = commands.add_parser('lineage', help='列出衍生祖先')
    lineage.add_argument('tx_id')
    lineage.add_argument('--peer', default='peer0')

    replay = commands.add_parser('replay', help='由溯源紀錄重新執行工作流程')
    replay.add_argument('tx_id')
    replay.add_argument('--peer', default='peer0')
    replay.add_argument('--dataset-dir', help='資料集目錄，預設為資料目錄下的 datasets')

    derive = commands.add_parser('derive', help='輸出衍生交易草稿')
    derive.add_argument('tx_id')
    derive.add_argument('renames', nargs='*', help='資料集替換 old=new')
    derive.add_argument('--asset', help='新資產名稱')
    derive.add_argument('--peer', default='peer0')

    export = commands.add_parser('export', help='匯出帳本')
    export.add_argument('--peer', default='peer0')
    export.add_argument('--format', choices=['canonical', 'csv'], default='canonical')
    export.add_argument('--output', help='輸出檔案，預設寫到 stdout')

    channel = commands.add_parser('channel', help='列出節點的頻道側存放')
    channel.add_argument('--peer', default='peer0')

    return parser


def dispatch(service: LedgerService, args: argparse.Namespace) -> int:
    """依子命令呼叫服務"""
    if args.command == 'run':
        return service.cmd_run(args.script)
    if args.command == 'verify':
        return service.cmd_verify(args.ledger, args.registry, args.peer)
    if args.command == 'query':
        return service.cmd_query(' '.join(args.expression), args.peer)
    if args.command == 'walk':
        return service.cmd_walk(args.direction, ' '.join(args.expression), args.peer)
    if args.command == 'lineage':
        return service.cmd_lineage(args.tx_id, args.peer)
    if args.command == 'replay':
        return service.cmd_replay(args.tx_id, args.peer, args.dataset_dir)
    if args.command == 'derive':
        renames = dict(item.split('=', 1) for item in args.renames if '=' in item)
        return service.cmd_derive(args.tx_id, renames, args.peer, args.asset)
    if args.command == 'export':
        return service.cmd_export(args.peer, args.format, args.output)
    return service.cmd_channel(args.peer)


def main(argv: Optional[List[str]] = None) -> int:
    """主函數"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # 設置日誌
    log_level = getattr(logging, args.log_level)
    logger = setup_logger('main', log_level)
    set_log_level(log_level)

    try:
        # 載入配置
        config = Config(args.config)
        cli_config = config.cli_config(
            data_dir=args.data_dir,
            seed=args.seed,
            batch_size=args.batch_size,
            peers=args.peers,
            porcelain=args.porcelain,
        )

        # 驗證配置
        if not config.validate():
            logger.error("配置驗證失敗，請檢查環境變數或命令列參數")
            return 2

        service = LedgerService(cli_config)
        code = dispatch(service, args)
        logger.info(f"{args.command} 結束，結束碼 {code}")
        return code

    except KeyboardInterrupt:
        logger.info("程序被用戶中斷")
        return 1
    except Exception as e:
        logger.error(f"程序執行失敗: {str(e)}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
