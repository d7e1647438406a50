use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ItemEntry, RerankRecord, PRICE_LEVELS};
use crate::error::{PrmError, Result};
use crate::pretrain::PvTable;
use crate::prm::PrmModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Category,
    PriceLevel,
    Position,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::Category => "category",
            Grouping::PriceLevel => "price_level",
            Grouping::Position => "position",
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = PrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Self::Category),
            "price_level" | "price" => Ok(Self::PriceLevel),
            "position" => Ok(Self::Position),
            _ => Err(PrmError::Config(format!(
                "unknown grouping `{s}` (expected category, price_level or position)"
            ))),
        }
    }
}

/// Which head's weights to aggregate. Written as `mean` or a head index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadSelect {
    #[default]
    Mean,
    Head(usize),
}

impl From<HeadSelect> for String {
    fn from(h: HeadSelect) -> String {
        match h {
            HeadSelect::Mean => "mean".into(),
            HeadSelect::Head(k) => k.to_string(),
        }
    }
}

impl TryFrom<String> for HeadSelect {
    type Error = PrmError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for HeadSelect {
    type Err = PrmError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(Self::Mean);
        }
        s.parse()
            .map(Self::Head)
            .map_err(|_| PrmError::Config(format!("head must be `mean` or an index, got `{s}`")))
    }
}

/// Mean attention from query group `g` (rows) to key group `g'` (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAggregate {
    pub grouping: Grouping,
    pub labels: Vec<String>,
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
}

impl AttentionAggregate {
    pub fn new(grouping: Grouping, labels: Vec<String>) -> Self {
        let g = labels.len();
        Self {
            grouping,
            labels,
            sums: vec![vec![0.0; g]; g],
            counts: vec![vec![0; g]; g],
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Cell mean, `None` for cells with no samples.
    pub fn mean(&self, g: usize, h: usize) -> Option<f64> {
        (self.counts[g][h] > 0).then(|| self.sums[g][h] / self.counts[g][h] as f64)
    }

    /// `G × G` matrix of means with `NaN` in empty cells.
    pub fn matrix(&self) -> Tensor2<f64> {
        let g = self.size();
        let mut m = Tensor2::zeros(g, g);
        for i in 0..g {
            for j in 0..g {
                m[(i, j)] = self.mean(i, j).unwrap_or(f64::NAN);
            }
        }
        m
    }

    /// Header of group labels, then one row per query group with six
    /// decimals; empty cells are left blank.
    pub fn to_csv(&self) -> String {
        let mut s = self.labels.join(",");
        s.push('\n');
        for i in 0..self.size() {
            let row: Vec<String> = (0..self.size())
                .map(|j| self.mean(i, j).map_or_else(String::new, |v| format!("{v:.6}")))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    fn add(&mut self, g: usize, h: usize, w: f64) {
        self.sums[g][h] += w;
        self.counts[g][h] += 1;
    }
}

fn group_of(grouping: Grouping, item: &ItemEntry, pos: usize, size: usize) -> Result<usize> {
    let g = match grouping {
        Grouping::Category => item.category as usize,
        Grouping::PriceLevel => item.price_level as usize - 1,
        Grouping::Position => pos,
    };
    if g >= size {
        return Err(PrmError::Vocabulary(format!(
            "item `{}` falls outside the {size} {grouping:?} groups",
            item.item_id
        )));
    }
    Ok(g)
}

/// Averages attention weights of `block` over the requests in `records`,
/// grouped by item attribute or position. `num_categories` sizes the
/// category grouping (taken from the dataset manifest).
pub fn export_attention<T: Scalar>(
    model: &PrmModel<T>,
    records: &[RerankRecord],
    pv: Option<&PvTable>,
    grouping: Grouping,
    block: Option<usize>,
    head: HeadSelect,
    num_categories: usize,
) -> Result<AttentionAggregate> {
    let cfg = &model.config;
    let block = block.unwrap_or(cfg.num_blocks - 1);
    if block >= cfg.num_blocks {
        return Err(PrmError::Config(format!("block {block} out of range (model has {})", cfg.num_blocks)));
    }
    if let HeadSelect::Head(h) = head {
        if h >= cfg.num_heads {
            return Err(PrmError::Config(format!("head {h} out of range (model has {})", cfg.num_heads)));
        }
    }
    let labels: Vec<String> = match grouping {
        Grouping::Category => (0..num_categories).map(|c| c.to_string()).collect(),
        Grouping::PriceLevel => (1..=PRICE_LEVELS).map(|c| c.to_string()).collect(),
        Grouping::Position => (1..=cfg.n_max).map(|c| c.to_string()).collect(),
    };
    let mut agg = AttentionAggregate::new(grouping, labels);
    let g = agg.size();
    for r in records {
        let scored = model.score_record(r, pv)?;
        let heads = &scored.attention[block];
        let n = r.items.len();
        let groups = r
            .items
            .iter()
            .enumerate()
            .map(|(k, it)| group_of(grouping, it, k, g))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..n {
            for j in 0..n {
                let w = match head {
                    HeadSelect::Head(h) => heads[h][(i, j)].to_f64_lossy(),
                    HeadSelect::Mean => {
                        heads.iter().map(|m| m[(i, j)].to_f64_lossy()).sum::<f64>() / heads.len() as f64
                    }
                };
                agg.add(groups[i], groups[j], w);
            }
        }
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_marks_empty_cells() {
        let mut a = AttentionAggregate::new(Grouping::Category, vec!["0".into(), "1".into()]);
        a.add(0, 0, 0.25);
        a.add(0, 0, 0.75);
        a.add(1, 0, 1.0 / 3.0);
        assert_eq!(a.to_csv(), "0,1\n0.500000,\n0.333333,\n");
        assert!(a.matrix()[(1, 1)].is_nan());
    }

    #[test]
    fn parses_selectors() {
        assert_eq!("mean".parse::<HeadSelect>().unwrap(), HeadSelect::Mean);
        assert_eq!("2".parse::<HeadSelect>().unwrap(), HeadSelect::Head(2));
        assert!("x".parse::<HeadSelect>().is_err());
        assert_eq!("price".parse::<Grouping>().unwrap(), Grouping::PriceLevel);
    }
}
