use serde::{Deserialize, Serialize};

use super::{MetricsError, ScaleDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterKind {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rater {
    pub id: String,
    pub kind: RaterKind,
}

impl Rater {
    pub fn human(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: RaterKind::Human,
        }
    }

    pub fn model(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: RaterKind::Model,
        }
    }
}

/// Items × raters → labels, stored as indices into the scale.
///
/// Cells may be missing. Items carrying fewer than two labels take no part in
/// reliability computations; they are counted as excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    items: Vec<String>,
    raters: Vec<Rater>,
    scale: ScaleDescriptor,
    /// Row-major: `cells[item][rater]`.
    cells: Vec<Vec<Option<usize>>>,
}

impl LabelMatrix {
    pub fn new(
        items: Vec<String>,
        raters: Vec<Rater>,
        scale: ScaleDescriptor,
    ) -> Result<Self, MetricsError> {
        if raters.len() < 2 {
            return Err(MetricsError::Shape(format!(
                "a label matrix needs at least 2 raters, got {}",
                raters.len()
            )));
        }
        if items.is_empty() {
            return Err(MetricsError::Shape("a label matrix needs at least 1 item".into()));
        }
        for (i, item) in items.iter().enumerate() {
            if items[..i].contains(item) {
                return Err(MetricsError::Shape(format!("duplicate item id {item:?}")));
            }
        }
        for (i, r) in raters.iter().enumerate() {
            if raters[..i].iter().any(|o| o.id == r.id) {
                return Err(MetricsError::Shape(format!("duplicate rater id {:?}", r.id)));
            }
        }
        let cells = vec![vec![None; raters.len()]; items.len()];
        Ok(Self {
            items,
            raters,
            scale,
            cells,
        })
    }

    /// Builds a matrix from complete rows of labels, one row per item and
    /// one column per rater. `None` marks a missing cell.
    pub fn from_rows<S: AsRef<str>>(
        raters: Vec<Rater>,
        scale: ScaleDescriptor,
        rows: &[Vec<Option<S>>],
    ) -> Result<Self, MetricsError> {
        let items = (0..rows.len()).map(|i| format!("i{i}")).collect();
        let mut m = Self::new(items, raters, scale)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m.raters.len() {
                return Err(MetricsError::Shape(format!(
                    "row {i} has {} cells for {} raters",
                    row.len(),
                    m.raters.len()
                )));
            }
            for (r, cell) in row.iter().enumerate() {
                if let Some(label) = cell {
                    m.set_index(i, r, label.as_ref())?;
                }
            }
        }
        Ok(m)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn raters(&self) -> &[Rater] {
        &self.raters
    }

    pub fn scale(&self) -> &ScaleDescriptor {
        &self.scale
    }

    pub fn set(&mut self, item: &str, rater: &str, label: &str) -> Result<(), MetricsError> {
        let i = self
            .items
            .iter()
            .position(|x| x == item)
            .ok_or_else(|| MetricsError::Shape(format!("unknown item {item:?}")))?;
        let r = self
            .raters
            .iter()
            .position(|x| x.id == rater)
            .ok_or_else(|| MetricsError::Shape(format!("unknown rater {rater:?}")))?;
        self.set_index(i, r, label)
    }

    fn set_index(&mut self, item: usize, rater: usize, label: &str) -> Result<(), MetricsError> {
        let v = self
            .scale
            .index_of(label)
            .ok_or_else(|| MetricsError::LabelOutOfScale(label.to_string()))?;
        self.cells[item][rater] = Some(v);
        Ok(())
    }

    pub fn get(&self, item: usize, rater: usize) -> Option<&str> {
        self.cells[item][rater].map(|v| self.scale.values()[v].as_str())
    }

    pub(crate) fn cell(&self, item: usize, rater: usize) -> Option<usize> {
        self.cells[item][rater]
    }

    pub(crate) fn row(&self, item: usize) -> impl Iterator<Item = usize> + '_ {
        self.cells[item].iter().flatten().copied()
    }

    /// Indices of items with at least two present labels.
    pub fn included_items(&self) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.row(i).count() >= 2)
            .collect()
    }

    pub fn excluded_count(&self) -> usize {
        self.items.len() - self.included_items().len()
    }

    /// The two-column matrix for raters `a` and `b`.
    pub fn pair(&self, a: usize, b: usize) -> LabelMatrix {
        LabelMatrix {
            items: self.items.clone(),
            raters: vec![self.raters[a].clone(), self.raters[b].clone()],
            scale: self.scale.clone(),
            cells: self
                .cells
                .iter()
                .map(|row| vec![row[a], row[b]])
                .collect(),
        }
    }

    /// The matrix restricted to raters of the given kind.
    pub fn restrict_to(&self, keep: impl Fn(&Rater) -> bool) -> Result<LabelMatrix, MetricsError> {
        let idx: Vec<usize> = (0..self.raters.len())
            .filter(|&r| keep(&self.raters[r]))
            .collect();
        let mut m = LabelMatrix::new(
            self.items.clone(),
            idx.iter().map(|&r| self.raters[r].clone()).collect(),
            self.scale.clone(),
        )?;
        for (i, row) in self.cells.iter().enumerate() {
            m.cells[i] = idx.iter().map(|&r| row[r]).collect();
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yn() -> ScaleDescriptor {
        ScaleDescriptor::binary(["no", "yes"], ["yes"])
    }

    #[test]
    fn shape_checks() {
        assert!(LabelMatrix::new(vec!["a".into()], vec![Rater::human("x")], yn()).is_err());
        assert!(LabelMatrix::new(vec![], vec![Rater::human("x"), Rater::human("y")], yn()).is_err());
        assert!(LabelMatrix::new(
            vec!["a".into()],
            vec![Rater::human("x"), Rater::model("x")],
            yn()
        )
        .is_err());
    }

    #[test]
    fn out_of_scale_label_rejected() {
        let mut m =
            LabelMatrix::new(vec!["a".into()], vec![Rater::human("x"), Rater::human("y")], yn())
                .unwrap();
        assert!(matches!(
            m.set("a", "x", "maybe"),
            Err(MetricsError::LabelOutOfScale(_))
        ));
    }

    #[test]
    fn sparse_items_are_excluded_not_errors() {
        let m = LabelMatrix::from_rows(
            vec![Rater::human("x"), Rater::human("y"), Rater::human("z")],
            yn(),
            &[
                vec![Some("yes"), None, None],
                vec![Some("yes"), Some("no"), None],
                vec![None, None, None],
            ],
        )
        .unwrap();
        assert_eq!(m.included_items(), vec![1]);
        assert_eq!(m.excluded_count(), 2);
    }
}
