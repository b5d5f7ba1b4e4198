//! Transformable time-aware convolution.
//!
//! A meta-filter network maps every element `z_n` of a sequence to one row
//! of `D` convolution filters. Filter entries are normalized with an
//! exponential normalization over the time axis, separately for every
//! (feature map, input channel) pair, so a filter always spans exactly the
//! sequence it is applied to. Each feature map then reduces the whole
//! sequence to one scalar: `h[d] = sum_n f_d[n] . z[n]`.
//!
//! Several sequences are processed at once by stacking their rows and
//! passing segment offsets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ttcn {
    /// Shared trunk, `d_in -> hidden -> hidden`, tanh after both layers.
    pub trunk: Mlp,
    /// The `maps` individual last layers packed side by side.
    pub heads: Linear,
    pub d_in: usize,
    pub maps: usize,
}

impl Ttcn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
        maps: usize,
    ) -> Self {
        let trunk = Mlp::new(store, rng, &format!("{name}.trunk"), &[d_in, hidden, hidden], Activation::Tanh);
        let heads = Linear::new(store, rng, &format!("{name}.heads"), hidden, maps * d_in);
        Self {
            trunk,
            heads,
            d_in,
            maps,
        }
    }

    /// Raw (pre-normalization) filter scores, `rows x (maps * d_in)`.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let h = self.trunk.forward(tape, store, z);
        let h = tape.tanh(h);
        self.heads.forward(tape, store, h)
    }

    /// Temporally normalized filters; column `d * d_in + c` is channel `c` of map `d`.
    pub fn derive_filters(&self, tape: &mut Tape, store: &ParamStore, z: Var, offsets: &[usize]) -> Result<Var> {
        self.check_input(tape, z, offsets)?;
        let raw = self.scores(tape, store, z);
        Ok(tape.segment_softmax(raw, offsets.to_vec()))
    }

    pub fn convolve(&self, tape: &mut Tape, filters: Var, z: Var, offsets: &[usize]) -> Result<Var> {
        self.check_input(tape, z, offsets)?;
        let f = tape.value(filters);
        if f.nrows() != tape.value(z).nrows() {
            return Err(Error::Shape(format!(
                "filter length {} does not match sequence length {}",
                f.nrows(),
                tape.value(z).nrows()
            )));
        }
        if f.ncols() != self.maps * self.d_in {
            return Err(Error::Shape(format!("filter width {} != {}", f.ncols(), self.maps * self.d_in)));
        }
        Ok(tape.filter_contract(filters, z, offsets.to_vec(), self.maps))
    }

    /// Sequence representations, one row of width `maps` per segment.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, offsets: &[usize]) -> Result<Var> {
        let f = self.derive_filters(tape, store, z, offsets)?;
        self.convolve(tape, f, z, offsets)
    }

    fn check_input(&self, tape: &Tape, z: Var, offsets: &[usize]) -> Result<()> {
        let zv = tape.value(z);
        if zv.ncols() != self.d_in {
            return Err(Error::Shape(format!("input width {} != {}", zv.ncols(), self.d_in)));
        }
        if offsets.first() != Some(&0) || offsets.last() != Some(&zv.nrows()) || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Shape("segments must be non-empty and cover the input".into()));
        }
        Ok(())
    }
}

/// Spatiotemporal representation: elementwise sum of the temporal and tail spatial parts.
pub fn fuse(tape: &mut Tape, temporal: Var, spatial_tail: Var) -> Result<Var> {
    if tape.value(temporal).dim() != tape.value(spatial_tail).dim() {
        return Err(Error::Shape(format!(
            "cannot fuse {:?} with {:?}",
            tape.value(temporal).dim(),
            tape.value(spatial_tail).dim()
        )));
    }
    Ok(tape.add(temporal, spatial_tail))
}
