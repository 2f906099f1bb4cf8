use super::{AutodiffError, Gradients, Graph, Scalar, Tensor, Var};

/// A named tensor with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
    /// Momentum buffer; same length as `value`.
    pub momentum: Vec<S>,
    /// Buffers such as running statistics are stored here but never stepped.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owning store of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<S>, trainable: bool) -> ParamId {
        let momentum = vec![S::zero(); value.len()];
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            momentum,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds the gradients of every bound parameter.
    pub fn accumulate(&mut self, grads: &Gradients<S>, binding: &Binding) {
        for &(id, var) in &binding.pairs {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b = *b + v),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Copies values into a store of another precision (same structure).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    momentum: vec![T::zero(); p.value.len()],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Parameter-to-node map of one forward pass.
#[derive(Debug, Default)]
pub struct Binding {
    pairs: Vec<(ParamId, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Puts a parameter on the tape (as a variable) and records the pair.
    pub fn bind<S: Scalar>(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.pairs.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = g.variable(store.value(id));
        self.pairs.push((id, v));
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.pairs.iter().find(|(p, _)| *p == id).map(|&(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μv + g + wd·θ;  θ ← θ − lr·v`, then clears the gradients.
pub fn sgd_step<S: Scalar>(store: &mut ParamStore<S>, cfg: SgdConfig) -> Result<(), AutodiffError> {
    if let Some(p) = store
        .params
        .iter()
        .find(|p| p.trainable && p.grad.is_none())
    {
        return Err(AutodiffError::MissingGradient {
            name: p.name.clone(),
        });
    }
    let (lr, mu, wd) = (
        S::lit(cfg.lr),
        S::lit(cfg.momentum),
        S::lit(cfg.weight_decay),
    );
    for p in store.params.iter_mut().filter(|p| p.trainable) {
        let grad = p.grad.take().expect("checked above");
        for ((theta, v), g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.iter_mut())
            .zip(grad)
        {
            *v = mu * *v + g + wd * *theta;
            *theta = *theta - lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::from_f64(vec![1], &[theta]).unwrap());
        store.get_mut(id).grad = Some(vec![grad]);
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = scalar_store(0.7, 0.0);
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut store, cfg).unwrap();
        assert_eq!(store.value(id).data(), &[0.7]);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn single_plain_step() {
        let (mut store, id) = scalar_store(1.0, 1.0);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut store, cfg).unwrap();
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_the_velocity_recursion() {
        // v1 = g1 + wd θ0; θ1 = θ0 - lr v1; v2 = μ v1 + g2 + wd θ1; θ2 = θ1 - lr v2
        let (theta0, g1, g2, lr, mu, wd) = (2.0, 0.5, -0.25, 0.1, 0.9, 0.01);
        let v1 = g1 + wd * theta0;
        let theta1 = theta0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * theta1;
        let theta2 = theta1 - lr * v2;

        let (mut store, id) = scalar_store(theta0, g1);
        let cfg = SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
        };
        sgd_step(&mut store, cfg).unwrap();
        store.get_mut(id).grad = Some(vec![g2]);
        sgd_step(&mut store, cfg).unwrap();
        assert!((store.value(id).data()[0] - theta2).abs() < 1e-14);
        assert!((store.get(id).momentum[0] - v2).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("w", Tensor::zeros(vec![2]));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(matches!(
            sgd_step(&mut store, cfg),
            Err(AutodiffError::MissingGradient { .. })
        ));
    }

    #[test]
    fn buffers_are_not_stepped() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let b = store.add_buffer("running_mean", Tensor::full(vec![3], 0.5));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        sgd_step(&mut store, cfg).unwrap();
        assert_eq!(store.value(b).data(), &[0.5; 3]);
    }
}
