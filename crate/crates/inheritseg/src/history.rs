//! Loss-history CSV.

use std::path::Path;

use inheritseg_core::losses::LossBundle;
use inheritseg_core::training::StepRecord;

use crate::error::{HarnessError, Result};

pub const HEADER: [&str; 8] = ["step", "epoch", "L_Cross", "L_Seen", "L_Bg", "L_Adv", "L_Seg", "L_D"];

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::format(path, e.to_string())
}

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for r in history {
        let mut row = vec![r.step.to_string(), r.epoch.to_string()];
        row.extend(r.losses.values().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(HarnessError::format(path, "unexpected loss-history header"));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| HarnessError::format(path, format!("bad number `{}`", &rec[i])))
            };
            Ok(StepRecord {
                step: rec[0].parse().map_err(|_| HarnessError::format(path, "bad step"))?,
                epoch: rec[1].parse().map_err(|_| HarnessError::format(path, "bad epoch"))?,
                losses: LossBundle {
                    cross: num(2)?,
                    seen: num(3)?,
                    bg: num(4)?,
                    adv: num(5)?,
                    seg: num(6)?,
                    disc: num(7)?,
                },
            })
        })
        .collect()
}
