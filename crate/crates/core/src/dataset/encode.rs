use super::{validate_sample, ClassMap, DefectSample, IndexMask, RgbImage};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Image channels followed by one binary plane per defect class.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    /// `[1, n_defect + 3, h, w]`.
    pub x: Tensor<f32>,
    pub n_defect: usize,
}

impl EncodedPair {
    pub fn from_tensor(x: Tensor<f32>, n_defect: usize) -> Result<Self> {
        if x.batch() != 1 || x.channels() != n_defect + 3 {
            return Err(shape_err(format!(
                "expected [1, {}, h, w], got {:?}",
                n_defect + 3,
                x.shape()
            )));
        }
        Ok(Self { x, n_defect })
    }

    pub fn n_total(&self) -> usize {
        self.n_defect + 3
    }

    pub fn image_channels(&self) -> Tensor<f32> {
        self.x.channel_range(0, 3)
    }

    pub fn defect_planes(&self) -> Tensor<f32> {
        self.x.channel_range(3, self.n_total())
    }
}

/// Plane `k` is 1 exactly where `mask == k + 1`.
pub fn one_hot_encode(mask: &IndexMask, n_defect: usize) -> Result<Tensor<f32>> {
    let plane = mask.height * mask.width;
    let mut out = Tensor::zeros([1, n_defect, mask.height, mask.width]);
    let data = out.data_mut();
    for (p, &v) in mask.data.iter().enumerate() {
        let v = v as usize;
        if v > n_defect {
            return Err(Error::Range {
                value: v as i64,
                context: format!("mask value exceeds n_defect = {n_defect}"),
            });
        }
        if v > 0 {
            data[(v - 1) * plane + p] = 1.0;
        }
    }
    Ok(out)
}

/// Per pixel: background if every plane is below `threshold`, otherwise the
/// 1-based index of the largest plane (lowest index on ties).
pub fn decode_mask<S: Real>(planes: &Tensor<S>, threshold: f64) -> Result<IndexMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} not in (0, 1)")));
    }
    let [n, k, h, w] = planes.shape();
    if n != 1 {
        return Err(shape_err(format!("decode expects one item, got {n}")));
    }
    if k > 255 {
        return Err(shape_err("more than 255 defect planes"));
    }
    let plane = h * w;
    let th = S::of(threshold);
    let data = planes.data();
    let mask = (0..plane)
        .map(|p| {
            let mut best = 0u8;
            let mut best_v = S::neg_infinity();
            for c in 0..k {
                let v = data[c * plane + p];
                if v >= th && v > best_v {
                    best = c as u8 + 1;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    IndexMask::new(h, w, mask)
}

/// `x = image ⊕ one_hot(mask)` along channels.
pub fn concat_pair(sample: &DefectSample, class_map: &ClassMap) -> Result<EncodedPair> {
    validate_sample(sample, class_map).into_result()?;
    let n_defect = class_map.n_defect();
    let (h, w) = (sample.image.height, sample.image.width);
    let planes = one_hot_encode(&sample.mask, n_defect)?;
    let mut data = Vec::with_capacity((n_defect + 3) * h * w);
    data.extend_from_slice(&sample.image.data);
    data.extend_from_slice(planes.data());
    EncodedPair::from_tensor(Tensor::from_vec([1, n_defect + 3, h, w], data)?, n_defect)
}

/// Image channels clamped to `[-1, 1]` and the decoded mask.
pub fn split_pair(pair: &EncodedPair, threshold: f64) -> Result<(RgbImage, IndexMask)> {
    let [_, _, h, w] = pair.x.shape();
    let img = pair
        .image_channels()
        .into_vec()
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    let mask = decode_mask(&pair.defect_planes(), threshold)?;
    Ok((RgbImage::new(h, w, img)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> IndexMask {
        IndexMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_example() {
        let planes = one_hot_encode(&mask(2, 2, &[0, 1, 2, 0]), 2).unwrap();
        assert_eq!(planes.data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
        let zero = one_hot_encode(&IndexMask::zeros(3, 3), 2).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let err = one_hot_encode(&mask(1, 2, &[0, 3]), 2).unwrap_err();
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn decode_thresholds_and_ties() {
        let low = Tensor::<f32>::from_vec([1, 2, 1, 2], vec![0.2; 4]).unwrap();
        assert_eq!(decode_mask(&low, 0.5).unwrap().data, vec![0, 0]);
        let tie = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![0.7, 0.7]).unwrap();
        assert_eq!(decode_mask(&tie, 0.5).unwrap().data, vec![1]);
        let second = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![0.6, 0.9]).unwrap();
        assert_eq!(decode_mask(&second, 0.5).unwrap().data, vec![2]);
        assert!(decode_mask(&tie, 1.0).is_err());
        assert!(decode_mask(&tie, 0.0).is_err());
    }

    #[test]
    fn concat_channel_counts() {
        for (n_defect, res) in [(1usize, 8usize), (5, 64)] {
            let names: Vec<String> = (0..n_defect).map(|i| format!("d{i}")).collect();
            let cm = ClassMap::with_defects(names).unwrap();
            let s = DefectSample {
                sample_id: "a".into(),
                image: RgbImage::new(res, res, vec![0.5; 3 * res * res]).unwrap(),
                mask: IndexMask::zeros(res, res),
                caption: None,
            };
            let pair = concat_pair(&s, &cm).unwrap();
            assert_eq!(pair.x.shape(), [1, n_defect + 3, res, res]);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(n_defect in 1usize..6, seed in proptest::collection::vec(0u8..=255, 256)) {
            let data: Vec<u8> = seed.iter().map(|v| v % (n_defect as u8 + 1)).collect();
            let m = mask(16, 16, &data);
            let planes = one_hot_encode(&m, n_defect).unwrap();
            // exclusivity
            for p in 0..256 {
                let s: f32 = (0..n_defect).map(|c| planes.data()[c * 256 + p]).sum();
                prop_assert!(s == 0.0 || s == 1.0);
            }
            prop_assert_eq!(decode_mask(&planes, 0.5).unwrap(), m);
        }

        #[test]
        fn concat_split_round_trip(pixels in proptest::collection::vec(0u8..=255, 3 * 64), labels in proptest::collection::vec(0u8..3, 64)) {
            let cm = ClassMap::with_defects(["a", "b"]).unwrap();
            let s = DefectSample {
                sample_id: "p".into(),
                image: RgbImage::from_rgb8(8, 8, &pixels).unwrap(),
                mask: mask(8, 8, &labels),
                caption: None,
            };
            let (img, m) = split_pair(&concat_pair(&s, &cm).unwrap(), 0.5).unwrap();
            prop_assert_eq!(img, s.image);
            prop_assert_eq!(m, s.mask);
        }
    }
}
