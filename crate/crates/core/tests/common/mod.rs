//! Printed values from the reference result tables (T1..T5).

#![allow(dead_code)]

use fairsam_core::fairmetrics::{
    accuracy_disparity, corrupted_degradation, corrupted_degradation_disparity, GroupedEval,
};
use fairsam_core::Group;

/// One method row: accuracies as printed, then the printed derived columns.
/// `None` marks a column the table does not have.
pub struct Row {
    pub table: &'static str,
    pub method: &'static str,
    /// (s⁺, s⁻, overall) under the reference condition.
    pub clean: (f64, f64, Option<f64>),
    /// (s⁺, s⁻, overall) under the compared condition.
    pub shifted: (f64, f64, Option<f64>),
    pub delta_p_plus: Option<f64>,
    pub delta_p_minus: Option<f64>,
    pub delta_acc: Option<f64>,
    pub delta_p: f64,
}

const fn full(
    table: &'static str,
    method: &'static str,
    clean: (f64, f64, f64),
    shifted: (f64, f64, f64),
    printed: [f64; 4],
) -> Row {
    Row {
        table,
        method,
        clean: (clean.0, clean.1, Some(clean.2)),
        shifted: (shifted.0, shifted.1, Some(shifted.2)),
        delta_p_plus: Some(printed[0]),
        delta_p_minus: Some(printed[1]),
        delta_acc: Some(printed[2]),
        delta_p: printed[3],
    }
}

const fn no_acc_gap(
    table: &'static str,
    method: &'static str,
    clean: (f64, f64, f64),
    shifted: (f64, f64, f64),
    printed: [f64; 3],
) -> Row {
    Row {
        table,
        method,
        clean: (clean.0, clean.1, Some(clean.2)),
        shifted: (shifted.0, shifted.1, Some(shifted.2)),
        delta_p_plus: Some(printed[0]),
        delta_p_minus: Some(printed[1]),
        delta_acc: None,
        delta_p: printed[2],
    }
}

const fn ood(table: &'static str, method: &'static str, in_dist: (f64, f64), out: (f64, f64), delta_p: f64) -> Row {
    Row {
        table,
        method,
        clean: (in_dist.0, in_dist.1, None),
        shifted: (out.0, out.1, None),
        delta_p_plus: None,
        delta_p_minus: None,
        delta_acc: None,
        delta_p,
    }
}

pub const ROWS: &[Row] = &[
    // T1: CelebA, Big Nose / Age, snow severity 3.
    full("T1", "Vanilla", (0.8572, 0.7171, 0.8232), (0.8457, 0.6309, 0.7901), [0.0115, 0.0862, 0.2148, 0.0747]),
    full("T1", "FairReg", (0.6530, 0.6492, 0.6517), (0.6315, 0.5904, 0.6217), [0.0215, 0.0588, 0.0411, 0.0373]),
    full("T1", "Reweighed", (0.8527, 0.7156, 0.7983), (0.8091, 0.6320, 0.7662), [0.0436, 0.0836, 0.1771, 0.0400]),
    full("T1", "SAM", (0.8590, 0.7043, 0.8215), (0.8500, 0.6377, 0.7984), [0.0090, 0.0666, 0.2123, 0.0576]),
    full("T1", "GroupSAM", (0.8571, 0.7046, 0.8199), (0.8497, 0.6512, 0.7809), [0.0074, 0.0534, 0.1985, 0.0460]),
    full("T1", "FairSAM", (0.8574, 0.7480, 0.8310), (0.8175, 0.6981, 0.7885), [0.0399, 0.0499, 0.1194, 0.0100]),
    // T2: CelebA, Blond Hair / Gender, Gaussian severity 3.
    full("T2", "Vanilla", (0.9769, 0.9318, 0.9493), (0.9763, 0.8235, 0.8827), [0.0006, 0.1083, 0.1528, 0.1077]),
    full("T2", "FairReg", (0.9442, 0.9532, 0.9387), (0.9723, 0.8258, 0.8824), [0.0281, 0.1094, 0.1465, 0.0813]),
    full("T2", "Reweighed", (0.9627, 0.9351, 0.9457), (0.9701, 0.8295, 0.8839), [0.0074, 0.1056, 0.1406, 0.1130]),
    full("T2", "SAM", (0.9797, 0.9363, 0.9531), (0.9629, 0.8788, 0.9114), [0.0168, 0.0575, 0.0841, 0.0407]),
    full("T2", "GroupSAM", (0.9780, 0.9406, 0.9551), (0.9686, 0.8938, 0.9228), [0.0094, 0.0468, 0.0748, 0.0374]),
    full("T2", "FairSAM", (0.9734, 0.9412, 0.9570), (0.9532, 0.9137, 0.9291), [0.0202, 0.0275, 0.0395, 0.0073]),
    // T3: FairFace, Gender / Age, Gaussian severity 5.
    no_acc_gap("T3", "Vanilla", (0.7396, 0.8296, 0.7800), (0.5692, 0.6288, 0.5961), [0.1704, 0.2088, 0.0304]),
    no_acc_gap("T3", "SAM", (0.7727, 0.8781, 0.8201), (0.6209, 0.7049, 0.6885), [0.1518, 0.1732, 0.0214]),
    no_acc_gap("T3", "GroupSAM", (0.7550, 0.8333, 0.7904), (0.6297, 0.6892, 0.6563), [0.1253, 0.1441, 0.0188]),
    no_acc_gap("T3", "FairSAM", (0.7837, 0.9075, 0.8394), (0.6370, 0.7536, 0.6893), [0.1467, 0.1539, 0.0072]),
    // T4: CelebA → LFW.
    ood("T4", "SAM", (0.8590, 0.7043), (0.5946, 0.4189), 0.0210),
    ood("T4", "GroupSAM", (0.8570, 0.7042), (0.5363, 0.5700), 0.1865),
    ood("T4", "FairSAM", (0.8575, 0.7480), (0.5341, 0.4058), 0.0188),
    // T5: LFW → CelebA.
    ood("T5", "SAM", (0.7714, 0.7687), (0.6863, 0.5380), 0.1456),
    ood("T5", "GroupSAM", (0.7784, 0.7963), (0.6590, 0.5270), 0.1499),
    ood("T5", "FairSAM", (0.7893, 0.7984), (0.6668, 0.5511), 0.1066),
];

/// Printed cells that do not follow from the printed accuracies of the same
/// row: (table, method, column).
pub const INCONSISTENT_CELLS: &[(&str, &str, &str)] = &[
    ("T2", "FairReg", "delta_p_minus"),
    // Follows from the printed Δp⁻ above, so it inherits the discrepancy.
    ("T2", "FairReg", "delta_p"),
    ("T2", "Reweighed", "delta_p"),
    ("T3", "Vanilla", "delta_p_minus"),
    ("T5", "FairSAM", "delta_p"),
];

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// One recomputed cell next to the printed value.
pub struct Cell {
    pub table: &'static str,
    pub method: &'static str,
    pub column: &'static str,
    pub printed: f64,
    pub computed: f64,
}

impl Cell {
    pub fn matches(&self) -> bool {
        round4(self.computed) == self.printed
    }
}

fn eval(label: &str, acc: (f64, f64, Option<f64>)) -> GroupedEval {
    // T4 and T5 have no overall accuracy; it does not enter any metric.
    GroupedEval::from_rates(label, acc.0, acc.1, acc.2.unwrap_or(f64::NAN))
}

/// Recomputes every printed derived cell through the metrics module.
pub fn recompute() -> Vec<Cell> {
    let mut out = Vec::new();
    for r in ROWS {
        let clean = eval("clean", r.clean);
        let shifted = eval("corrupted", r.shifted);
        let report = corrupted_degradation_disparity(&clean, &shifted).expect("both groups present");
        let mut push = |column, printed: Option<f64>, computed: f64| {
            if let Some(printed) = printed {
                out.push(Cell {
                    table: r.table,
                    method: r.method,
                    column,
                    printed,
                    computed,
                });
            }
        };
        push(
            "delta_p_plus",
            r.delta_p_plus,
            corrupted_degradation(&clean, &shifted, Group::Advantaged).unwrap(),
        );
        push(
            "delta_p_minus",
            r.delta_p_minus,
            corrupted_degradation(&clean, &shifted, Group::Disadvantaged).unwrap(),
        );
        push("delta_acc", r.delta_acc, accuracy_disparity(&shifted).unwrap());
        push("delta_p", Some(r.delta_p), report.delta_p);
    }
    out
}
