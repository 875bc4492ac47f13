use crate::error::Result;
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bound, Linear, ParamStore, SeedRng};

/// Gated recurrent unit.
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl Gru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Gru {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * hidden, true, rng),
            recurrent: Linear::new(store, &format!("{name}.recurrent"), hidden, 3 * hidden, true, rng),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let xi = self.input.forward(tape, p, x)?;
        let hh = self.recurrent.forward(tape, p, h)?;
        let xz = tape.slice(xi, 0, 2 * n)?;
        let hz = tape.slice(hh, 0, 2 * n)?;
        let gates = tape.add(xz, hz)?;
        let gates = tape.sigmoid(gates);
        let z = tape.slice(gates, 0, n)?;
        let r = tape.slice(gates, n, n)?;
        let xn = tape.slice(xi, 2 * n, n)?;
        let hn = tape.slice(hh, 2 * n, n)?;
        let rhn = tape.mul(r, hn)?;
        let cand = tape.add(xn, rhn)?;
        let cand = tape.tanh(cand);
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        tape.add(cand, keep)
    }
}
