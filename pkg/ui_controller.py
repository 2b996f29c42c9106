from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import argparse
import json
import logging
import subprocess
import sys

from tqdm import tqdm

from config import RunConfig, apply_overrides, load_config
from errors import DataError, MissingInput, TakError
from formatter import (
    format_class_reports,
    format_epoch_table,
    format_knowledge_table,
    format_last_steps_table,
    format_summary,
    format_sweep_table,
)
from inference import predict_volume, save_prediction, select_model
from input_utils import parse_class_list, parse_overrides
from knowledge import generate_knowledge, knowledge_table_rows, load_knowledge, make_chat_client, save_knowledge, validate_knowledge
from log_stats import epoch_summaries, get_last_records, read_training_log
from log_writer import log_command, setup_logging
from metrics import (
    class_report,
    read_report_csv,
    summarize_reports,
    write_report_csv,
    write_scatter_csv,
    write_summary_json,
)
from phantom_data import generate_corpus, load_corpus, load_phantom_spec, load_volume
from text_prior import encode_priors, load_embedding_cache, make_text_encoder, save_embedding_cache
from trainer import fit, make_sampler, restore_model_pair
from visualizer import highlight_text, print_error, print_info, print_success, progress_line

MAIN_SCRIPT = Path(__file__).resolve().parent / "main.py"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON-файл RunConfig")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="переопределение ключа конфигурации")

    parser = argparse.ArgumentParser(prog="tak", description="🩻 Сегментация органов с текстовыми знаниями")
    commands = parser.add_subparsers(dest="command", required=True)

    knowledge = commands.add_parser("knowledge", help="генерация и проверка знаний")
    knowledge_commands = knowledge.add_subparsers(dest="action", required=True)
    gen = knowledge_commands.add_parser("gen", parents=[common], help="сгенерировать файл знаний")
    gen.add_argument("--classes", help="список классов через запятую (иначе class_names из конфигурации)")
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(handler=handle_knowledge_gen)
    check = knowledge_commands.add_parser("validate", parents=[common], help="перепроверить файл знаний")
    check.set_defaults(handler=handle_knowledge_validate)

    encode = commands.add_parser("encode", parents=[common], help="закодировать знания в кэш эмбеддингов")
    encode.set_defaults(handler=handle_encode)

    phantom = commands.add_parser("phantom", help="фантомный корпус")
    phantom_commands = phantom.add_subparsers(dest="action", required=True)
    phantom_gen = phantom_commands.add_parser("gen", parents=[common], help="сгенерировать корпус фантомов")
    phantom_gen.set_defaults(handler=handle_phantom_gen)

    train = commands.add_parser("train", parents=[common], help="обучение учитель-ученик")
    train.set_defaults(handler=handle_train)

    evaluate = commands.add_parser("eval", parents=[common], help="оценка на разбиении корпуса")
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="чекпоинт для прогноза скользящим окном")
    source.add_argument("--pred-dir", help="каталог готовых прогнозов <case_id>_pred.nii.gz")
    evaluate.add_argument("--split", default="test", choices=["labeled", "unlabeled", "val", "test"])
    evaluate.add_argument("--out", help="каталог отчёта (по умолчанию <run_dir>/eval)")
    evaluate.set_defaults(handler=handle_eval)

    infer = commands.add_parser("infer", parents=[common], help="прогноз для одного тома")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--input", required=True)
    infer.add_argument("--output", required=True)
    infer.add_argument("--probs", action="store_true", help="сохранить вероятности рядом (.npz)")
    infer.set_defaults(handler=handle_infer)

    report = commands.add_parser("report", parents=[common], help="сводка и диаграмма рассеяния по отчёту")
    report.add_argument("--report-csv", required=True)
    report.add_argument("--baseline", help="CSV-отчёт базового прогона для dice_delta")
    report.add_argument("--train-log", help="NDJSON-журнал обучения для таблицы по эпохам")
    report.add_argument("--last-steps", type=int, default=5, help="сколько последних шагов журнала показать")
    report.add_argument("--out", help="каталог вывода (по умолчанию рядом с отчётом)")
    report.set_defaults(handler=handle_report)

    sweep = commands.add_parser("sweep", parents=[common], help="сетка абляций из манифеста")
    sweep.add_argument("--manifest", required=True)
    sweep.add_argument("--max-parallel", type=int, help="переопределяет max_parallel манифеста")
    sweep.set_defaults(handler=handle_sweep)
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig().validate()
    return apply_overrides(config, parse_overrides(args.set))


def run_app(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        config = load_run_config(args)
        args.handler(args, config)
        return 0
    except TakError as e:
        print_error(e.message)
        print(json.dumps(e.to_record(), ensure_ascii=False), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print_info("Прервано пользователем")
        return 130
    except Exception as e:
        logging.exception("Непредвиденная ошибка")
        print_error(str(e))
        record = {"error": type(e).__name__, "message": str(e), "exit_code": 1}
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
        return 1


# 🧠 Знания и эмбеддинги
@log_command("knowledge gen")
def handle_knowledge_gen(args: argparse.Namespace, config: RunConfig) -> None:
    class_names = parse_class_list(args.classes) if args.classes else config.class_names
    client = make_chat_client(seed=config.training.seed)
    records = generate_knowledge(class_names, client, client, max_workers=args.workers)
    save_knowledge(records, config.knowledge_path)
    format_knowledge_table(knowledge_table_rows(records))
    print_success(f"Знания для {len(records)} классов сохранены в {config.knowledge_path}")


@log_command("knowledge validate")
def handle_knowledge_validate(args: argparse.Namespace, config: RunConfig) -> None:
    records = validate_knowledge(load_knowledge(config.knowledge_path), make_chat_client(seed=config.training.seed))
    save_knowledge(records, config.knowledge_path)
    format_knowledge_table(knowledge_table_rows(records))
    print_success(f"Файл знаний перепроверен: {config.knowledge_path}")


@log_command("encode")
def handle_encode(args: argparse.Namespace, config: RunConfig) -> None:
    records = load_knowledge(config.knowledge_path)
    names = [r.class_name for r in records]
    if names != config.class_names:
        raise DataError(
            f"Классы файла знаний {names} не совпадают с class_names {config.class_names}",
            path=config.knowledge_path,
        )
    encoder = make_text_encoder(config.encoder, config.model.text_dim, config.encoder_seed)
    embeddings = encode_priors(records, encoder, config.prompt_kind)
    save_embedding_cache(embeddings, config.embedding_cache)
    print_success(f"Эмбеддинги ({config.prompt_kind}) сохранены в {config.embedding_cache}")


# 🫁 Фантомы
@log_command("phantom gen")
def handle_phantom_gen(args: argparse.Namespace, config: RunConfig) -> None:
    spec = load_phantom_spec(config.phantom_spec_path)
    if spec.class_names != config.class_names:
        raise DataError(
            f"Органы спецификации {spec.class_names} не совпадают с class_names {config.class_names}",
            path=config.phantom_spec_path,
        )
    corpus = generate_corpus(
        spec, config.n_cases, config.corpus_dir, config.labeled_fraction, split_seed=config.training.seed
    )
    split = corpus.split
    print_success(
        f"Корпус {corpus.root}: {len(split.labeled)} размеч. / {len(split.unlabeled)} неразмеч. / "
        f"{len(split.val)} val / {len(split.test)} test"
    )


# 🔥 Обучение
@log_command("train")
def handle_train(args: argparse.Namespace, config: RunConfig) -> None:
    priors = load_embedding_cache(config.embedding_cache, config.class_names)
    corpus = load_corpus(config.corpus_dir)
    if corpus.class_names != config.class_names:
        raise DataError(
            f"Классы корпуса {corpus.class_names} не совпадают с class_names {config.class_names}",
            path=config.corpus_dir,
        )

    highlight_text(f"Обучение → {config.run_dir} (хэш {config.config_hash()})")
    epochs = config.training.epochs
    _, summaries = fit(
        config,
        make_sampler(corpus, config),
        priors,
        config.run_dir,
        on_epoch=lambda s: progress_line(s["epoch"], epochs, s["L_s"], s["lr"]),
    )
    format_epoch_table(summaries[-5:])
    print_success(f"Обучение завершено, чекпоинт: {Path(config.run_dir) / 'checkpoint_last.pt'}")


# 📊 Оценка
@log_command("eval")
def handle_eval(args: argparse.Namespace, config: RunConfig) -> None:
    corpus = load_corpus(config.corpus_dir)
    case_ids = getattr(corpus.split, args.split)
    if not case_ids:
        raise DataError(f"Разбиение '{args.split}' пусто", path=config.corpus_dir)

    model = None
    if args.checkpoint:
        pair, _, _ = restore_model_pair(args.checkpoint)
        model = select_model(pair, config.inference.use_teacher)

    reports = []
    for case_id in tqdm(case_ids, desc="Оценка", unit="случай"):
        image, label, spacing = corpus.load_case(case_id)
        if model is not None:
            prediction, _ = predict_volume(image, model, config.inference.window, config.inference.stride)
        else:
            prediction, _ = load_volume(Path(args.pred_dir) / f"{case_id}_pred.nii.gz")
        reports.extend(class_report(prediction, label, corpus.class_names, spacing, case_id=case_id))

    out_dir = Path(args.out) if args.out else Path(config.run_dir) / "eval"
    summary = summarize_reports(reports)
    write_report_csv(reports, out_dir / "report.csv")
    write_summary_json(summary, out_dir / "summary.json", config_hash=config.config_hash())
    write_scatter_csv(reports, out_dir / "scatter.csv")

    format_class_reports(reports)
    format_summary(summary)
    print_success(f"Отчёт сохранён в {out_dir}")


@log_command("infer")
def handle_infer(args: argparse.Namespace, config: RunConfig) -> None:
    pair, _, _ = restore_model_pair(args.checkpoint)
    model = select_model(pair, config.inference.use_teacher)
    volume, spacing = load_volume(args.input)
    labels, probs = predict_volume(volume.astype("float32"), model, config.inference.window, config.inference.stride)
    save_prediction(labels, args.output, spacing, probs if args.probs else None)
    print_success(f"Прогноз сохранён: {args.output}")


@log_command("report")
def handle_report(args: argparse.Namespace, config: RunConfig) -> None:
    reports = read_report_csv(args.report_csv)
    baseline = read_report_csv(args.baseline) if args.baseline else None
    out_dir = Path(args.out) if args.out else Path(args.report_csv).parent

    summary = summarize_reports(reports)
    write_summary_json(summary, out_dir / "summary.json", config_hash=config.config_hash())
    write_scatter_csv(reports, out_dir / "scatter.csv", baseline)
    format_summary(summary)

    if args.train_log:
        records = read_training_log(args.train_log)
        format_epoch_table(epoch_summaries(records))
        format_last_steps_table(get_last_records(records, limit=args.last_steps))
    print_success(f"Сводка и диаграмма рассеяния сохранены в {out_dir}")


# 🧪 Абляции
def _cli(command: List[str], config_path: Optional[str], overrides: Dict[str, Any]) -> List[str]:
    argv = [sys.executable, str(MAIN_SCRIPT), *command]
    if config_path:
        argv += ["--config", config_path]
    for key, value in overrides.items():
        argv += ["--set", f"{key}={json.dumps(value) if not isinstance(value, str) else value}"]
    return argv


def cell_overrides(cell: Dict[str, Any], global_overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Общие `--set` идут первыми, значения ячейки и её пути перекрывают их."""
    run_dir = Path(cell["run_dir"])
    overrides = dict(global_overrides)
    overrides.update(cell["overrides"])
    overrides.update(run_dir=str(run_dir), embedding_cache=str(run_dir / "embeddings.bin"))
    return overrides


def _run_cell(cell: Dict[str, Any], config_path: Optional[str], global_overrides: Dict[str, Any]) -> Dict[str, Any]:
    run_dir = Path(cell["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    overrides = cell_overrides(cell, global_overrides)

    steps = [
        ["encode"],
        ["train"],
        ["eval", "--checkpoint", str(run_dir / "checkpoint_last.pt"), "--out", str(run_dir / "eval")],
    ]
    exit_code = 0
    with (run_dir / "sweep.log").open("w", encoding="utf-8") as log:
        for step in steps:
            argv = _cli(step, config_path, overrides)
            logging.info(f"Ячейка {cell['name']}: {' '.join(argv)}")
            exit_code = subprocess.run(argv, stdout=log, stderr=subprocess.STDOUT).returncode
            if exit_code != 0:
                break

    result = {"name": cell["name"], "overrides": cell["overrides"], "exit_code": exit_code, "dice": None}
    summary_path = run_dir / "eval" / "summary.json"
    if exit_code == 0 and summary_path.exists():
        result["dice"] = json.loads(summary_path.read_text(encoding="utf-8"))["all"]["dice"]
    return result


def expand_sweep(manifest: Dict[str, Any], root: Path) -> List[Dict[str, Any]]:
    """Ячейки × seeds → список запусков с собственными run_dir."""
    seeds = manifest.get("seeds") or [None]
    cells = []
    for cell in manifest["cells"]:
        for seed in seeds:
            overrides = dict(cell.get("set", {}))
            name = cell["name"]
            if seed is not None:
                overrides["training.seed"] = seed
                name = f"{name}_seed{seed}"
            cells.append({"name": name, "overrides": overrides, "run_dir": str(root / name)})
    return cells


@log_command("sweep")
def handle_sweep(args: argparse.Namespace, config: RunConfig) -> None:
    path = Path(args.manifest)
    if not path.exists():
        raise MissingInput(path, "манифест абляции")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        root = Path(manifest.get("out_dir", Path("runs") / path.stem))
        cells = expand_sweep(manifest, root)
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{path}: некорректный манифест абляции ({e})", path=str(path)) from e

    max_parallel = args.max_parallel or int(manifest.get("max_parallel", 1))
    config_path = args.config or manifest.get("base_config")
    global_overrides = parse_overrides(args.set)

    highlight_text(f"Абляция {path.stem}: {len(cells)} запусков, параллельно до {max_parallel}")
    with ThreadPoolExecutor(max_workers=max(1, max_parallel)) as pool:
        results = list(pool.map(lambda c: _run_cell(c, config_path, global_overrides), cells))

    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep_results.json").write_text(json.dumps(results, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    format_sweep_table(results)
    failed = [r["name"] for r in results if r["exit_code"] != 0]
    if failed:
        print_error(f"Ячейки с ошибкой: {', '.join(failed)}")
    else:
        print_success(f"Все ячейки завершены, итоги: {root / 'sweep_results.json'}")
