//! Per-class color statistics, used to check that a planted color bias is
//! actually visible in the data.

use ctraj_nn::Scalar;
use serde::{Deserialize, Serialize};

use super::{class_name, LabeledImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub class: usize,
    pub class_name: String,
    pub count: usize,
    /// Means on a 0..255 scale.
    pub lesion_red: f64,
    pub skin_red: f64,
    pub lesion_saturation: f64,
    pub skin_saturation: f64,
}

fn saturation(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

#[derive(Default)]
struct Acc {
    red: f64,
    sat: f64,
    n: usize,
}

impl Acc {
    fn mean(&self) -> (f64, f64) {
        if self.n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (255.0 * self.red / self.n as f64, 255.0 * self.sat / self.n as f64)
        }
    }
}

/// Mean red channel and HSV saturation inside and outside the lesion mask,
/// per class. Classes with no images are left out.
pub fn color_bias_audit<T: Scalar>(images: &[&LabeledImage<T>], num_classes: usize) -> Vec<AuditRow> {
    let mut rows = Vec::new();
    for class in 0..num_classes {
        let members: Vec<_> = images.iter().filter(|im| im.class_label == class).collect();
        if members.is_empty() {
            log::warn!("color audit: class {} has no images, skipped", class_name(class));
            continue;
        }
        let (mut lesion, mut skin) = (Acc::default(), Acc::default());
        for im in &members {
            let d = im.image.data();
            let plane = im.lesion_mask.data.len();
            for p in 0..plane {
                let (r, g, b) = (d[p].as_f64(), d[plane + p].as_f64(), d[2 * plane + p].as_f64());
                let acc = if im.lesion_mask.data[p] { &mut lesion } else { &mut skin };
                acc.red += r;
                acc.sat += saturation(r, g, b);
                acc.n += 1;
            }
        }
        let (lesion_red, lesion_saturation) = lesion.mean();
        let (skin_red, skin_saturation) = skin.mean();
        rows.push(AuditRow {
            class,
            class_name: class_name(class).to_string(),
            count: members.len(),
            lesion_red,
            skin_red,
            lesion_saturation,
            skin_saturation,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    #[test]
    fn red_bias_raises_skin_red_and_saturation() {
        let spec = DatasetSpec { samples_per_class: 30, image_size: 32, ..DatasetSpec::default() };
        let ds = generate_dataset::<f32>(&spec).unwrap();
        let all: Vec<_> = ds.images.iter().collect();
        let rows = color_bias_audit(&all, 4);
        assert_eq!(rows.len(), 4);
        let nv = &rows[1];
        for other in [&rows[2], &rows[3]] {
            assert!(nv.skin_red > other.skin_red, "{nv:?} vs {other:?}");
            assert!(nv.skin_saturation > other.skin_saturation);
        }
    }

    #[test]
    fn empty_class_is_omitted() {
        let spec = DatasetSpec { samples_per_class: 3, image_size: 32, ..DatasetSpec::default() };
        let ds = generate_dataset::<f32>(&spec).unwrap();
        let only0: Vec<_> = ds.images.iter().filter(|im| im.class_label == 0).collect();
        let rows = color_bias_audit(&only0, 4);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].class_name, "MEL");
        assert!((0.0..=255.0).contains(&rows[0].lesion_red));
    }
}
