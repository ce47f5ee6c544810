use super::{DiffError, GradStore, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error <= threshold
    }
}

fn eval<Fn_>(store: &ParameterStore<f64>, f: &Fn_) -> Result<f64, DiffError>
where
    Fn_: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(DiffError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares backward-pass gradients of every parameter in `store` against
/// central differences with step `h`.
pub fn grad_check_store<Fn_>(
    op: &str,
    store: &mut ParameterStore<f64>,
    h: f64,
    f: Fn_,
) -> Result<GradCheckReport, DiffError>
where
    Fn_: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let mut analytic = GradStore::new(store);
    tape.backward(out)?.accumulate_into(&mut analytic);

    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store, &f);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store, &f);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(DiffError::NonFinite("grad_check"));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (store.name(id).to_string(), i);
            }
        }
    }
    Ok(report)
}

/// Gradient check with respect to plain input tensors. The closure receives
/// one bound variable per input, in order.
pub fn grad_check<Fn_>(op: &str, inputs: &[Tensor<f64>], h: f64, f: Fn_) -> Result<GradCheckReport, DiffError>
where
    Fn_: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut store = ParameterStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("input{i}"), t.clone()))
        .collect();
    grad_check_store(op, &mut store, h, |tape, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    })
}
