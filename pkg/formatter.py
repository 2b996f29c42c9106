from typing import Any, Dict, List, Optional, Sequence
from prettytable import PrettyTable, DEFAULT
import math

from metrics import ClassReport


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "—"
    return f"{value:.{digits}f}"


def format_knowledge_table(rows: List[Dict[str, Any]]) -> None:
    if not rows:
        print("🤷 Файл знаний пуст.")
        return

    print("\n📚 Знания по классам:")
    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["ID", "Класс", "Источник", "Проверено", "Положение (предл.)", "Форма (предл.)"]
    table.align["Класс"] = "l"
    for row in rows:
        table.add_row([
            row["class_id"],
            row["class_name"],
            row["source"],
            "✅" if row["validated"] else "—",
            row["position_sentences"],
            row["shape_sentences"],
        ])
    print(table)


def format_epoch_table(summaries: Sequence[Dict[str, Any]]) -> None:
    if not summaries:
        print("📭 Журнал обучения пуст.")
        return

    print("\n🔥 Средние потери по эпохам:")
    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["Эпоха", "Шагов", "L_s", "L_u", "L_con", "λ_u", "lr"]
    for s in summaries:
        table.add_row([
            s["epoch"],
            s["steps"],
            _fmt(s["L_s"]),
            _fmt(s["L_u"]),
            _fmt(s["L_con"]),
            _fmt(s["lambda_u"], 3),
            _fmt(s["lr"], 5),
        ])
    print(table)


def format_last_steps_table(records: Sequence[Dict[str, Any]]) -> None:
    if not records:
        return

    print("\n🕘 Последние шаги обучения:")
    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["Шаг", "Эпоха", "L_s", "L_u", "L_con", "lr"]
    for r in records:
        table.add_row([r["step"], r["epoch"], _fmt(r["L_s"]), _fmt(r["L_u"]), _fmt(r["L_con"]), _fmt(r["lr"], 5)])
    print(table)


def format_class_reports(reports: Sequence[ClassReport], limit: int = 40) -> None:
    if not reports:
        print("😢 Нет метрик для вывода.")
        return

    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["Случай", "Класс", "Dice", "ASD", "Доля", "Группа", "CHVR"]
    table.align["Класс"] = "l"
    table.max_width["Класс"] = 24
    for r in list(reports)[:limit]:
        table.add_row([
            r.case_id or "—",
            r.class_name,
            _fmt(r.dice),
            _fmt(r.asd, 2),
            _fmt(r.voxel_proportion),
            "L." if r.size_group == "large" else "S.",
            _fmt(r.chvr, 3),
        ])
    print(table)
    if len(reports) > limit:
        print(f"   ➡️ ещё {len(reports) - limit} строк в CSV-отчёте")


def format_summary(summary: Dict[str, Any]) -> None:
    print(f"\n📊 Итог по {summary.get('cases', 0)} случаям:")
    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["", "All", "L.", "S."]
    groups = [summary["all"], summary["large"], summary["small"]]
    table.add_row(["Dice"] + [_fmt(g["dice"]) for g in groups])
    table.add_row(["ASD"] + [_fmt(g["asd"], 2) for g in groups])
    table.add_row(["Классов"] + [g["classes"] for g in groups])
    print(table)


def format_sweep_table(results: Sequence[Dict[str, Any]]) -> None:
    if not results:
        print("🤷 Нет ячеек абляции.")
        return

    print("\n🧪 Результаты абляции:")
    table = PrettyTable()
    table.set_style(DEFAULT)
    table.field_names = ["Ячейка", "Переопределения", "Код выхода", "Dice (All)"]
    table.align["Переопределения"] = "l"
    table.max_width["Переопределения"] = 60
    for r in results:
        overrides = ", ".join(f"{k}={v}" for k, v in r["overrides"].items())
        table.add_row([r["name"], overrides or "—", r["exit_code"], _fmt(r.get("dice"))])
    print(table)
