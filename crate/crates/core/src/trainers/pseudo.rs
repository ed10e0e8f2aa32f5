use crate::error::{Error, Result};
use crate::models::{ModelParams, PSEUDO_PREDICTOR};
use crate::tensor::Tensor;

use super::config::Ablation;

/// The pseudo-label predictor `h_p`, its labels on the target training rows, and its proxy accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelState {
    /// Holds only the `h_p` component.
    predictor: ModelParams,
    labels: Vec<usize>,
    best_proxy: f64,
}

impl PseudoLabelState {
    /// Copies `f o g` of `params` into `h_p` and labels `target_x` with it.
    pub fn from_model(params: &ModelParams, target_x: &Tensor, proxy: f64) -> Result<Self> {
        let mut state = PseudoLabelState {
            predictor: ModelParams::new(),
            labels: Vec::new(),
            best_proxy: proxy,
        };
        state.adopt(params, target_x)?;
        Ok(state)
    }

    fn adopt(&mut self, params: &ModelParams, target_x: &Tensor) -> Result<()> {
        let mut copy = params.clone();
        copy.copy_classifier_to_pseudo_predictor()?;
        let layers = copy
            .remove(PSEUDO_PREDICTOR)
            .expect("pseudo predictor was just inserted");
        let mut predictor = ModelParams::new();
        predictor.insert(PSEUDO_PREDICTOR, layers);
        self.labels = predictor.forward(PSEUDO_PREDICTOR, target_x)?.argmax_rows();
        self.predictor = predictor;
        Ok(())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn best_proxy(&self) -> f64 {
        self.best_proxy
    }

    pub fn predictor(&self) -> &ModelParams {
        &self.predictor
    }

    /// Labels for a batch of target training rows.
    pub fn labels_for(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|&r| {
                self.labels.get(r).copied().ok_or_else(|| {
                    Error::MissingPseudoLabels(format!(
                        "row {r} of {} labeled target rows",
                        self.labels.len()
                    ))
                })
            })
            .collect()
    }
}

/// Refreshes pseudo labels at a checkpoint. Returns whether `h_p` was replaced.
///
/// The default rule swaps only on a strict improvement of the proxy accuracy.
/// `fixed_pseudo_labels` never swaps; `self_labels` always takes the current model.
pub fn maybe_update_pseudo_labels<F>(
    state: &mut PseudoLabelState,
    params: &ModelParams,
    proxy_eval: F,
    iteration: usize,
    k: usize,
    target_x: &Tensor,
    ablation: &Ablation,
) -> Result<bool>
where
    F: FnOnce(&ModelParams) -> Result<f64>,
{
    if k == 0 || !iteration.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "pseudo labels are refreshed every {k} iterations, not at {iteration}"
        )));
    }
    if ablation.fixed_pseudo_labels {
        return Ok(false);
    }
    let proxy = proxy_eval(params).map_err(|e| e.in_stage("pseudo-label proxy"))?;
    if ablation.self_labels {
        state.adopt(params, target_x)?;
        state.best_proxy = state.best_proxy.max(proxy);
        return Ok(true);
    }
    if proxy > state.best_proxy {
        state.adopt(params, target_x)?;
        state.best_proxy = proxy;
        return Ok(true);
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Architecture, CLASSIFIER};

    fn setup() -> (ModelParams, Tensor) {
        let params = init_params(&Architecture::desk_default(2, 3), 4).unwrap();
        let x = Tensor::new(
            vec![5, 2],
            vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        (params, x)
    }

    fn shifted(params: &ModelParams) -> ModelParams {
        let mut p = params.clone();
        let f = p.get_mut(CLASSIFIER).unwrap();
        f[0].bias.data_mut()[2] += 5.0;
        p
    }

    #[test]
    fn improvement_swaps_and_regenerates() {
        let (params, x) = setup();
        let mut state = PseudoLabelState::from_model(&params, &x, 0.7).unwrap();
        let newer = shifted(&params);
        let swapped = maybe_update_pseudo_labels(
            &mut state,
            &newer,
            |_| Ok(0.8),
            100,
            100,
            &x,
            &Ablation::default(),
        )
        .unwrap();
        assert!(swapped);
        assert_eq!(state.best_proxy(), 0.8);
        assert_eq!(state.labels(), newer.predict(&x).unwrap().as_slice());
        assert_eq!(state.labels(), vec![2; 5].as_slice());
    }

    #[test]
    fn no_improvement_leaves_state_bitwise() {
        let (params, x) = setup();
        let mut state = PseudoLabelState::from_model(&params, &x, 0.7).unwrap();
        let before = state.clone();
        for proxy in [0.6, 0.7] {
            let swapped = maybe_update_pseudo_labels(
                &mut state,
                &shifted(&params),
                |_| Ok(proxy),
                200,
                100,
                &x,
                &Ablation::default(),
            )
            .unwrap();
            assert!(!swapped);
            assert_eq!(state, before);
        }
    }

    #[test]
    fn labels_match_argmax_of_the_copied_predictor() {
        let (params, x) = setup();
        let state = PseudoLabelState::from_model(&params, &x, 0.0).unwrap();
        let logits = state.predictor().forward(PSEUDO_PREDICTOR, &x).unwrap();
        assert_eq!(state.labels(), logits.argmax_rows().as_slice());
        assert_eq!(state.labels(), params.predict(&x).unwrap().as_slice());
    }

    #[test]
    fn ablations_and_preconditions() {
        let (params, x) = setup();
        let mut state = PseudoLabelState::from_model(&params, &x, 0.5).unwrap();
        let fixed = Ablation {
            fixed_pseudo_labels: true,
            ..Ablation::default()
        };
        assert!(
            !maybe_update_pseudo_labels(&mut state, &params, |_| Ok(1.0), 10, 10, &x, &fixed)
                .unwrap()
        );
        assert_eq!(state.best_proxy(), 0.5);

        let selfl = Ablation {
            self_labels: true,
            ..Ablation::default()
        };
        let newer = shifted(&params);
        assert!(
            maybe_update_pseudo_labels(&mut state, &newer, |_| Ok(0.1), 10, 10, &x, &selfl)
                .unwrap()
        );
        assert_eq!(state.labels(), newer.predict(&x).unwrap().as_slice());
        assert_eq!(state.best_proxy(), 0.5);

        assert!(maybe_update_pseudo_labels(
            &mut state,
            &params,
            |_| Ok(1.0),
            15,
            10,
            &x,
            &Ablation::default()
        )
        .is_err());
        let failing = maybe_update_pseudo_labels(
            &mut state,
            &params,
            |_| Err(Error::Config("boom".into())),
            10,
            10,
            &x,
            &Ablation::default(),
        );
        assert!(failing.is_err());
        assert!(matches!(
            state.labels_for(&[99]),
            Err(Error::MissingPseudoLabels(_))
        ));
    }
}
