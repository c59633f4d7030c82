use crate::error::Result;
use crate::nn::{Gdnet, ParamStore, Session};
use crate::tensor::{bilinear_resize, Tensor};

/// Output maps in `[0, 1]` at the resolution of the image passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub final_map: Tensor,
    pub high_map: Tensor,
    pub low_map: Tensor,
    pub boundary_high: Option<Tensor>,
    pub boundary_low: Option<Tensor>,
}

impl Prediction {
    /// Named maps in a fixed order; boundary maps only when present.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("final", &self.final_map), ("high", &self.high_map), ("low", &self.low_map)];
        if let Some(b) = &self.boundary_high {
            v.push(("boundary_high", b));
        }
        if let Some(b) = &self.boundary_low {
            v.push(("boundary_low", b));
        }
        v
    }
}

/// Eval-mode forward pass. Images of other sizes are resized to the network
/// input and the maps resized back.
pub fn predict(net: &Gdnet, store: &mut ParamStore, image: &Tensor) -> Result<Prediction> {
    let s = image.shape();
    let (h, w) = net.cfg.input_size;
    let input = bilinear_resize(image, h, w)?;
    let mut sess = Session::new(store, false);
    let out = net.forward(&mut sess, &input)?;
    let back = |t: &Tensor| -> Result<Tensor> { Ok(bilinear_resize(t, s.h, s.w)?.map(|v| v.clamp(0.0, 1.0))) };
    let g = &sess.graph;
    Ok(Prediction {
        final_map: back(g.value(out.final_map))?,
        high_map: back(g.value(out.high_map))?,
        low_map: back(g.value(out.low_map))?,
        boundary_high: out.boundary_high.map(|v| back(g.value(v))).transpose()?,
        boundary_low: out.boundary_low.map(|v| back(g.value(v))).transpose()?,
    })
}
