use super::DataError;

/// A classification dataset: its modality phrase and ordered class names.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub id: String,
    pub modality: String,
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    pub fn new(id: &str, modality: &str, class_names: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            modality: modality.to_string(),
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Ordered set of datasets. The order fixes each dataset's slice of the joint
/// TSM label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    datasets: Vec<DatasetSpec>,
}

impl Catalog {
    pub fn new(datasets: Vec<DatasetSpec>) -> Result<Self, DataError> {
        for (i, d) in datasets.iter().enumerate() {
            if datasets[..i].iter().any(|o| o.id == d.id) {
                return Err(DataError::InvalidConfig(format!("duplicate dataset id {}", d.id)));
            }
        }
        Ok(Self { datasets })
    }

    /// Dermatoscopy (the seven HAM10000 lesion types) first, followed by the
    /// other modalities whose class names make up the warm-up pool.
    pub fn builtin() -> Self {
        Self::new(vec![
            DatasetSpec::new(
                "derma",
                "dermatoscope",
                &[
                    "actinic keratoses",
                    "basal cell carcinoma",
                    "benign keratosis-like lesions",
                    "dermatofibroma",
                    "melanoma",
                    "melanocytic nevi",
                    "vascular lesions",
                ],
            ),
            DatasetSpec::new(
                "retina",
                "fundus",
                &[
                    "no retinopathy",
                    "mild retinopathy",
                    "moderate retinopathy",
                    "severe retinopathy",
                    "proliferative retinopathy",
                ],
            ),
            DatasetSpec::new(
                "blood",
                "blood smear",
                &[
                    "basophil",
                    "eosinophil",
                    "erythroblast",
                    "immature granulocytes",
                    "lymphocyte",
                    "monocyte",
                    "neutrophil",
                    "platelet",
                ],
            ),
            DatasetSpec::new(
                "oct",
                "retinal OCT",
                &["choroidal neovascularization", "diabetic macular edema", "drusen", "normal retina"],
            ),
            DatasetSpec::new("pneumonia", "chest X-ray", &["normal lungs", "pneumonia"]),
        ])
        .expect("builtin ids are unique")
    }

    pub fn datasets(&self) -> &[DatasetSpec] {
        &self.datasets
    }

    pub fn get(&self, id: &str) -> Result<&DatasetSpec, DataError> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| DataError::UnknownDataset(id.to_string()))
    }

    /// Keeps only the named datasets, in the given order.
    pub fn subset(&self, ids: &[&str]) -> Result<Self, DataError> {
        let picked = ids.iter().map(|id| self.get(id).cloned()).collect::<Result<Vec<_>, _>>()?;
        Self::new(picked)
    }

    /// Half-open range of joint label indices owned by `id`.
    pub fn class_range(&self, id: &str) -> Result<std::ops::Range<usize>, DataError> {
        let mut start = 0;
        for d in &self.datasets {
            if d.id == id {
                return Ok(start..start + d.num_classes());
            }
            start += d.num_classes();
        }
        Err(DataError::UnknownDataset(id.to_string()))
    }

    pub fn total_classes(&self) -> usize {
        self.datasets.iter().map(|d| d.num_classes()).sum()
    }

    /// Every class name across all datasets, in catalog order.
    pub fn all_class_names(&self) -> Vec<&str> {
        self.datasets.iter().flat_map(|d| d.class_names.iter().map(String::as_str)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_disjoint_and_cover() {
        let c = Catalog::builtin();
        let mut next = 0;
        for d in c.datasets() {
            let r = c.class_range(&d.id).unwrap();
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, c.total_classes());
        assert_eq!(c.get("derma").unwrap().num_classes(), 7);
    }

    #[test]
    fn first_words_of_derma_classes_are_distinct() {
        let c = Catalog::builtin();
        let firsts: std::collections::BTreeSet<_> = c
            .get("derma")
            .unwrap()
            .class_names
            .iter()
            .map(|n| n.split(' ').next().unwrap().to_string())
            .collect();
        assert_eq!(firsts.len(), 7);
    }
}
