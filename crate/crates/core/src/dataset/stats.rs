use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::{component_areas, equivalent_diameter, DatasetError, Manifest, Split};
use crate::image;

/// Diameter bins: `< 3`, `[3, 10)`, `[10, 30)`, `>= 30` mm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum DiameterBin {
    Under3,
    From3To10,
    From10To30,
    Over30,
}

impl DiameterBin {
    pub const ALL: [DiameterBin; 4] = [Self::Under3, Self::From3To10, Self::From10To30, Self::Over30];

    pub fn of(d_mm: f64) -> Self {
        if d_mm < 3.0 {
            Self::Under3
        } else if d_mm < 10.0 {
            Self::From3To10
        } else if d_mm < 30.0 {
            Self::From10To30
        } else {
            Self::Over30
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Under3 => "<3mm",
            Self::From3To10 => "3-10mm",
            Self::From10To30 => "10-30mm",
            Self::Over30 => ">30mm",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitNoduleCounts {
    pub bins: [usize; 4],
}

impl SplitNoduleCounts {
    pub fn total(&self) -> usize {
        self.bins.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NoduleStats {
    pub per_split: BTreeMap<Split, SplitNoduleCounts>,
}

impl NoduleStats {
    pub fn total(&self) -> usize {
        self.per_split.values().map(|c| c.total()).sum()
    }

    /// Comma-separated table, one row per split plus a total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split");
        for b in DiameterBin::ALL {
            let _ = write!(s, ",{}", b.label());
        }
        s.push_str(",total\n");
        let mut grand = SplitNoduleCounts::default();
        for (split, c) in &self.per_split {
            let _ = write!(s, "{split}");
            for (i, v) in c.bins.iter().enumerate() {
                let _ = write!(s, ",{v}");
                grand.bins[i] += v;
            }
            let _ = writeln!(s, ",{}", c.total());
        }
        s.push_str("total");
        for v in grand.bins {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", grand.total());
        s
    }
}

/// Counts one nodule observation per 8-connected foreground component per mask,
/// binned by equivalent-circle diameter.
pub fn nodule_stats(m: &Manifest) -> Result<NoduleStats, DatasetError> {
    let mut stats = NoduleStats::default();
    for split in Split::ASSIGNED {
        stats.per_split.insert(split, SplitNoduleCounts::default());
    }
    for (i, s) in m.samples.iter().enumerate() {
        let Some(mask_path) = m.mask_path(i) else { continue };
        let mask = image::read_mask_png(&mask_path)?;
        let areas = component_areas(&mask);
        if areas.is_empty() {
            continue;
        }
        let [sr, sc] = s.pixel_spacing.ok_or_else(|| DatasetError::MissingSpacing(s.image_path.clone()))?;
        let entry = stats.per_split.entry(s.split).or_default();
        for a in areas {
            entry.bins[DiameterBin::of(equivalent_diameter(a, (sr, sc))) as usize] += 1;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_edges() {
        assert_eq!(DiameterBin::of(1.128), DiameterBin::Under3);
        assert_eq!(DiameterBin::of(3.0), DiameterBin::From3To10);
        assert_eq!(DiameterBin::of(29.99), DiameterBin::From10To30);
        assert_eq!(DiameterBin::of(30.0), DiameterBin::Over30);
    }

    #[test]
    fn csv_totals() {
        let mut st = NoduleStats::default();
        st.per_split.insert(Split::Training, SplitNoduleCounts { bins: [1, 2, 3, 4] });
        st.per_split.insert(Split::Test, SplitNoduleCounts { bins: [0, 1, 0, 0] });
        let csv = st.to_csv();
        assert!(csv.contains("training,1,2,3,4,10\n"));
        assert!(csv.ends_with("total,1,3,3,4,11\n"));
        assert_eq!(st.total(), 11);
    }
}
