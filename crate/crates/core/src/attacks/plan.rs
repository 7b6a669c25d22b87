use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bits::{flip_bit_unchecked, hex_pattern, BitAddress, FlipRecord, LAST_BIT};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Bits committed by one attack run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlipPlan {
    pub records: Vec<FlipRecord>,
    /// Number of records, i.e. flips actually made.
    pub realized: usize,
    /// Budget that could not be spent for lack of eligible candidates.
    pub shortfall: usize,
}

impl FlipPlan {
    pub fn new(records: Vec<FlipRecord>, requested: usize) -> Self {
        let realized = records.len();
        Self {
            records,
            realized,
            shortfall: requested.saturating_sub(realized),
        }
    }

    pub fn empty(requested: usize) -> Self {
        Self::new(Vec::new(), requested)
    }

    pub fn requested(&self) -> usize {
        self.realized + self.shortfall
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when no bit address occurs twice.
    pub fn addresses_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.records.iter().all(|r| seen.insert(&r.address))
    }

    pub(crate) fn extend(&mut self, other: FlipPlan) {
        self.realized += other.realized;
        self.shortfall += other.shortfall;
        self.records.extend(other.records);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("<plan>", e.column() as u64, e.to_string()))
    }

    /// `layer,role,offset,bit,old_hex,new_hex,predicted_score` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,role,offset,bit,old_hex,new_hex,predicted_score\n");
        for r in &self.records {
            let a = &r.address;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:e}",
                a.layer,
                a.role,
                a.offset,
                a.bit,
                hex_pattern(r.old_value),
                hex_pattern(r.new_value),
                r.predicted_score
            );
        }
        out
    }
}

fn resolve(model: &Model, a: &BitAddress) -> Result<(usize, usize)> {
    let li = model
        .layer_index(&a.layer)
        .ok_or_else(|| Error::arg(format!("plan names unknown layer `{}`", a.layer)))?;
    let len = model
        .param(li, a.role)
        .ok_or_else(|| Error::arg(format!("layer `{}` has no {}", a.layer, a.role)))?
        .len();
    if a.offset >= len || a.bit > LAST_BIT {
        return Err(Error::arg(format!(
            "address {}.{}[{}] bit {} out of bounds",
            a.layer, a.role, a.offset, a.bit
        )));
    }
    Ok((li, a.offset))
}

fn flip_all<'a>(model: &mut Model, records: impl Iterator<Item = &'a FlipRecord>) -> Result<()> {
    let targets = records
        .map(|r| resolve(model, &r.address).map(|(li, off)| (li, r.address.role, off, r.address.bit)))
        .collect::<Result<Vec<_>>>()?;
    for (li, role, off, bit) in targets {
        let v = &mut model.param_mut(li, role).unwrap().data_mut()[off];
        *v = flip_bit_unchecked(*v, bit);
    }
    Ok(())
}

/// Flips every record's bit. All addresses are validated before anything changes.
pub fn apply_plan(model: &mut Model, plan: &FlipPlan) -> Result<()> {
    flip_all(model, plan.records.iter())
}

/// Undoes [`apply_plan`], flipping the records in reverse order.
pub fn revert_plan(model: &mut Model, plan: &FlipPlan) -> Result<()> {
    flip_all(model, plan.records.iter().rev())
}
