"""Built-in vessel-arrival configurations for Tasks 1-6.

Column order follows the fixture JSON layout: arrival_time, max_leave_time,
cargo_volume, min_quay_crane, max_quay_crane, base_power_load,
charge_power_demand, charge_power_max, length, max_waiting_time.
"""
from __future__ import annotations

COLUMNS = ("arrival_time", "max_leave_time", "cargo_volume", "min_quay_crane", "max_quay_crane",
           "base_power_load", "charge_power_demand", "charge_power_max", "length", "max_waiting_time")

TASK_ROWS = {
    1: [
        (0, 14, 2866, 1, 3, 4, 7, 1.59, 148, 5),
        (0, 9, 1816, 1, 3, 1, 11, 2.5, 122, 5),
        (0, 14, 913, 1, 3, 1, 0, 0, 164, 5),
        (2, 10, 1606, 1, 3, 4, 11, 1.375, 199, 5),
        (3, 9, 493, 1, 2, 2, 8, 1.66, 95, 5),
        (5, 15, 1351, 1, 2, 2, 11, 2.16, 134, 5),
        (7, 20, 746, 1, 1, 2, 0, 0, 102, 5),
        (10, 22, 2446, 1, 3, 3, 0, 0, 83, 5),
        (14, 26, 668, 1, 3, 1, 0, 0, 107, 5),
    ],
    2: [
        (0, 14, 2866, 1, 3, 3, 12, 1.36, 148, 5),
        (3, 12, 606, 1, 1, 3, 14, 2.46, 143, 5),
        (4, 10, 869, 2, 3, 3, 0, 0, 151, 5),
        (6, 12, 549, 1, 3, 2, 0, 0, 113, 5),
        (8, 14, 846, 2, 3, 2, 0, 0, 121, 5),
        (9, 17, 1071, 2, 2, 3, 13, 3.33, 111, 5),
        (10, 17, 931, 1, 2, 3, 6, 1.25, 145, 5),
        (11, 24, 886, 1, 1, 3, 9, 3.75, 88, 5),
        (15, 21, 567, 1, 3, 1, 0, 0, 184, 5),
    ],
    3: [
        (0, 11, 2236, 1, 3, 3, 0, 0, 152, 5),
        (3, 15, 2446, 1, 3, 1, 13, 2.28, 188, 5),
        (7, 19, 832, 1, 2, 4, 0, 0, 153, 5),
        (9, 23, 2866, 1, 3, 4, 5, 1.28, 153, 5),
        (10, 20, 1351, 1, 2, 4, 0, 0, 144, 5),
        (12, 18, 1582, 2, 4, 3, 5, 1.25, 101, 5),
        (13, 20, 838, 2, 2, 2, 0, 0, 89, 5),
        (14, 23, 497, 1, 1, 2, 0, 0, 124, 5),
        (15, 25, 673, 1, 3, 2, 0, 0, 110, 5),
    ],
    4: [
        (0, 13, 558, 1, 3, 1, 0, 0, 166, 5),
        (0, 8, 1606, 2, 3, 2, 10, 2.27, 155, 5),
        (0, 10, 2026, 1, 3, 2, 12, 1.82, 169, 5),
        (3, 9, 932, 2, 4, 4, 0, 0, 82, 5),
        (6, 18, 2446, 1, 3, 4, 0, 0, 178, 5),
        (9, 19, 466, 1, 3, 4, 0, 0, 99, 5),
        (10, 23, 582, 1, 3, 2, 0, 0, 147, 5),
        (13, 26, 2656, 1, 3, 2, 0, 0, 140, 5),
        (15, 29, 2866, 1, 3, 3, 0, 0, 153, 5),
        (16, 28, 681, 1, 2, 4, 0, 0, 124, 5),
        (17, 23, 763, 2, 2, 4, 0, 0, 141, 5),
    ],
    5: [
        (0, 7, 931, 1, 2, 1, 0, 0, 83, 5),
        (0, 7, 450, 1, 1, 1, 0, 0, 173, 5),
        (1, 9, 905, 2, 4, 2, 0, 0, 198, 5),
        (4, 17, 1771, 1, 2, 4, 0, 0, 151, 5),
        (7, 20, 2656, 1, 3, 2, 0, 0, 153, 5),
        (11, 23, 2446, 1, 3, 4, 0, 0, 156, 5),
        (14, 25, 640, 1, 1, 4, 0, 0, 189, 5),
        (15, 29, 516, 1, 3, 1, 0, 0, 171, 5),
        (16, 25, 606, 1, 1, 3, 0, 0, 80, 5),
    ],
    6: [
        (0, 8, 555, 1, 2, 3, 0, 0, 87, 5),
        (0, 11, 921, 1, 3, 2, 0, 0, 172, 5),
        (2, 8, 830, 2, 3, 3, 0, 0, 180, 5),
        (6, 16, 484, 1, 2, 3, 0, 0, 159, 5),
        (8, 21, 886, 1, 1, 1, 9, 1.07, 160, 5),
        (11, 21, 1351, 1, 2, 4, 13, 2.36, 195, 5),
        (13, 27, 1911, 1, 2, 3, 12, 2.31, 78, 5),
        (17, 28, 746, 1, 1, 4, 0, 0, 156, 5),
        (18, 31, 886, 1, 1, 2, 13, 2.71, 143, 5),
    ],
}


def fixture_rows(task_id: int) -> list[dict]:
    if task_id not in TASK_ROWS:
        raise KeyError(f"unknown task id {task_id}; built-in fixtures are 1..6")
    return [dict(zip(COLUMNS, row)) for row in TASK_ROWS[task_id]]
