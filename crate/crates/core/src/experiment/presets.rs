use crate::protocols::CilStyle;

use super::Task;

/// Named hyper-parameter row. `w_lreg` is multiplied by the InfoMax weight
/// when `lreg_times_lambda` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub task: Task,
    pub w_p1: f64,
    pub w_p2: f64,
    pub w_lreg: f64,
    pub lreg_times_lambda: bool,
    pub lr_mult: Option<f64>,
    pub style: Option<CilStyle>,
    pub epochs: Option<usize>,
}

const fn gcd(name: &'static str, w_p1: f64, w_p2: f64, w_lreg: f64, scaled: bool) -> Preset {
    Preset {
        name,
        task: Task::Gcd,
        w_p1,
        w_p2,
        w_lreg,
        lreg_times_lambda: scaled,
        lr_mult: None,
        style: None,
        epochs: None,
    }
}

const fn mdg(name: &'static str, w_p1: f64, w_p2: f64, w_lreg: f64, lr_mult: f64) -> Preset {
    Preset {
        name,
        task: Task::MdgGcd,
        w_p1,
        w_p2,
        w_lreg,
        lreg_times_lambda: false,
        lr_mult: Some(lr_mult),
        style: None,
        epochs: None,
    }
}

const fn cil(name: &'static str, style: CilStyle, w_p1: f64, w_p2: f64, w_lreg: f64) -> Preset {
    Preset {
        name,
        task: Task::Cil,
        w_p1,
        w_p2,
        w_lreg,
        lreg_times_lambda: false,
        lr_mult: None,
        style: Some(style),
        epochs: Some(CIL_EPOCHS),
    }
}

/// Per-session epochs of the CIL presets.
pub const CIL_EPOCHS: usize = 50;

/// Default `w_p1` values for a sensitivity sweep.
pub const SWEEP_W_P1: [f64; 3] = [5e-4, 1e-3, 2e-3];

use CilStyle::{Ordered, Shuffled};

pub const PRESETS: &[Preset] = &[
    gcd("table4_cub", 1.0, 0.5, 0.1, false),
    gcd("table4_stanford_cars", 5.0, 0.5, 1e-3, true),
    gcd("table4_herbarium19", 1.5e2, 1e2, 2e-1, true),
    gcd("table4_cifar100", 1.0, 0.5, 2.5e-4, true),
    gcd("table4_cifar10", 1e3, 5.0, 1e-2, true),
    gcd("table4_imagenet100", 1.0, 0.5, 1e-2, true),
    mdg("table5_pacs", 5e-2, 5e-2, 1e-1, 0.5),
    mdg("table5_homeoffice", 1e-1, 5e-2, 1e-1, 1.0),
    mdg("table5_vlcs", 1e2, 5e-2, 1e-1, 5.0),
    mdg("table5_terraincognita", 7.5, 5e-2, 1e-1, 4.5),
    mdg("table5_domainnet", 1e-1, 5e-2, 1e-1, 1.0),
    cil("table8_cifar100_ordered", Ordered, 1e-4, 1e-4, 1e-3),
    cil("table8_imagenet_subset_ordered", Ordered, 1e-3, 1e-3, 5e-3),
    cil("table8_cifar100_shuffled", Shuffled, 1e-3, 1e-3, 1e-3),
    cil("table8_imagenet_subset_shuffled", Shuffled, 1e-3, 1e-3, 1e-3),
    cil("table9_cifar100_ordered", Ordered, 1e-4, 1e-4, 1e-2),
    cil("table9_imagenet_subset_ordered", Ordered, 1e-4, 1e-4, 1e-2),
    cil("table9_cifar100_shuffled", Shuffled, 1e-3, 1e-3, 1e-2),
    cil("table9_imagenet_subset_shuffled", Shuffled, 1e-3, 1e-3, 5e-3),
];

pub fn find_preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
