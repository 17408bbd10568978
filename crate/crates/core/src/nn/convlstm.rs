//! Convolutional LSTM cell.
//!
//! All four gate pre-activations come from a single 3×3 convolution over
//! the channel concatenation `[x_t, h_{t-1}]`, which equals the sum of
//! separate input and hidden convolutions. The same weights serve every
//! timestep.

use super::{Conv2d, Ctx, Initializer, ParamStore};
use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

/// Gate blocks in the order they appear along the output channels of the
/// gate convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState<'t, T> {
    pub h: Var<'t, T>,
    pub cell: Var<'t, T>,
}

impl<'t, T: Real> ConvLstmState<'t, T> {
    pub fn zeros(ctx: &Ctx<'t, '_, T>, dims: Dims) -> Self {
        ConvLstmState {
            h: ctx.tape().constant(Tensor::zeros(dims)),
            cell: ctx.tape().constant(Tensor::zeros(dims)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub c_in: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        hidden: usize,
    ) -> Result<Self> {
        let gates = Conv2d::new(
            store,
            init,
            &format!("{name}.gates"),
            c_in + hidden,
            4 * hidden,
            3,
            true,
        )?;
        Ok(ConvLstmCell {
            gates,
            c_in,
            hidden,
        })
    }

    /// Channel range of one gate inside the gate convolution's output.
    pub fn gate_channels(&self, gate: Gate) -> std::ops::Range<usize> {
        let start = gate as usize * self.hidden;
        start..start + self.hidden
    }

    pub fn step<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        state: ConvLstmState<'t, T>,
    ) -> Result<ConvLstmState<'t, T>> {
        let (xd, hd, cd) = (x.dims(), state.h.dims(), state.cell.dims());
        if xd.c != self.c_in
            || hd.c != self.hidden
            || hd != cd
            || (xd.n, xd.h, xd.w) != (hd.n, hd.h, hd.w)
        {
            return Err(Error::shape(format!(
                "convlstm: input {xd} / hidden {hd} / cell {cd} do not fit a cell with {} inputs and {} hidden channels",
                self.c_in, self.hidden
            )));
        }
        let pre = self.gates.forward(ctx, concat_channels(&[x, state.h])?)?;
        let gate = |g: Gate| pre.narrow_channels(g as usize * self.hidden, self.hidden);
        let i = gate(Gate::Input)?.sigmoid();
        let f = gate(Gate::Forget)?.sigmoid();
        let o = gate(Gate::Output)?.sigmoid();
        let candidate = gate(Gate::Candidate)?.tanh();
        let cell = f.mul(state.cell)?.add(i.mul(candidate)?)?;
        let h = o.mul(cell.tanh())?;
        Ok(ConvLstmState { h, cell })
    }

    /// Runs the cell over `steps` from a zero state and returns the final
    /// hidden state.
    pub fn run<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        steps: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let first = steps
            .first()
            .ok_or_else(|| Error::EmptyInput("convlstm over an empty sequence".into()))?;
        let d = first.dims();
        let mut state = ConvLstmState::zeros(ctx, Dims::new(d.n, self.hidden, d.h, d.w)?);
        for &x in steps {
            state = self.step(ctx, x, state)?;
        }
        Ok(state.h)
    }
}
