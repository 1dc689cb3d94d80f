//! One synthetic scene with its aligned ground-truth maps.

use crate::data::mtt::{NamedTensor, TensorData};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Label value excluded from segmentation loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[H × W × 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Class id per pixel.
    pub semseg: Vec<u8>,
    /// Meters, `[H × W]`.
    pub depth: Tensor<f32>,
    /// Unit vectors, `[H × W × 3]`.
    pub normal: Tensor<f32>,
    /// 1 on label boundaries.
    pub edge: Vec<u8>,
    /// 1 where the stored normal is valid (off depth discontinuities).
    pub normal_mask: Vec<u8>,
    pub saliency: Option<Vec<u8>>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![
            NamedTensor::from_tensor("image", &self.image),
            NamedTensor {
                name: "semseg".into(),
                shape: vec![h, w],
                data: TensorData::U8(self.semseg.clone()),
            },
            NamedTensor::from_tensor("depth", &self.depth),
            NamedTensor::from_tensor("normal", &self.normal),
            NamedTensor {
                name: "edge".into(),
                shape: vec![h, w],
                data: TensorData::U8(self.edge.clone()),
            },
            NamedTensor {
                name: "normal_mask".into(),
                shape: vec![h, w],
                data: TensorData::U8(self.normal_mask.clone()),
            },
        ];
        if let Some(s) = &self.saliency {
            out.push(NamedTensor {
                name: "saliency".into(),
                shape: vec![h, w],
                data: TensorData::U8(s.clone()),
            });
        }
        out
    }

    /// Rebuild from container entries; `(h, w)` is the expected geometry.
    pub fn from_named(entries: &[NamedTensor], h: usize, w: usize) -> Result<Sample> {
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let need = |name: &str| find(name).ok_or_else(|| Error::Data(format!("missing entry {name}")));
        let float = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let e = need(name)?;
            if e.shape != shape {
                return Err(Error::Data(format!("{name}: shape {:?}, expected {shape:?}", e.shape)));
            }
            match &e.data {
                TensorData::F32(v) => Tensor::new(shape, v.clone()),
                other => Err(Error::Data(format!("{name}: expected f32, found {:?}", other.dtype()))),
            }
        };
        let bytes = |e: &NamedTensor| -> Result<Vec<u8>> {
            if e.shape != [h, w] {
                return Err(Error::Data(format!("{}: shape {:?}, expected {:?}", e.name, e.shape, [h, w])));
            }
            match &e.data {
                TensorData::U8(v) => Ok(v.clone()),
                other => Err(Error::Data(format!("{}: expected u8, found {:?}", e.name, other.dtype()))),
            }
        };
        let depth = float("depth", &[h, w])?;
        if let Some(bad) = depth.data().iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::Data(format!("depth: invalid value {bad}")));
        }
        Ok(Sample {
            height: h,
            width: w,
            image: float("image", &[h, w, 3])?,
            semseg: bytes(need("semseg")?)?,
            depth,
            normal: float("normal", &[h, w, 3])?,
            edge: bytes(need("edge")?)?,
            normal_mask: bytes(need("normal_mask")?)?,
            saliency: find("saliency").map(bytes).transpose()?,
        })
    }

    /// Mirror left-right. Normal x components change sign.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.height, self.width);
        let src = |i: usize| {
            let (y, x) = (i / w, i % w);
            y * w + (w - 1 - x)
        };
        let flip_u8 = |v: &[u8]| (0..h * w).map(|i| v[src(i)]).collect::<Vec<_>>();
        let flip_f = |t: &Tensor<f32>, c: usize, negate_x: bool| {
            let d = t.data();
            let data = (0..h * w * c)
                .map(|i| {
                    let (p, ch) = (i / c, i % c);
                    let v = d[src(p) * c + ch];
                    if negate_x && ch == 0 {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(t.shape(), data).expect("shape preserved")
        };
        Sample {
            height: h,
            width: w,
            image: flip_f(&self.image, 3, false),
            semseg: flip_u8(&self.semseg),
            depth: flip_f(&self.depth, 1, false),
            normal: flip_f(&self.normal, 3, true),
            edge: flip_u8(&self.edge),
            normal_mask: flip_u8(&self.normal_mask),
            saliency: self.saliency.as_deref().map(flip_u8),
        }
    }
}
