use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numkernel::{argmax_rows, infer, softmax_cross_entropy, Tensor};

/// Fixed chunk size for whole-dataset inference.
pub const EVAL_CHUNK: usize = 250;

/// Predicted class per example; ties go to the lowest class index.
pub fn predict(model: &ModelState, batch: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&infer(model, batch)?))
}

/// Predictions for every instance of `dataset`, in dataset order.
pub fn predict_dataset(model: &ModelState, dataset: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.batches(EVAL_CHUNK, 0, false) {
        let (x, _) = dataset.batch(&chunk)?;
        out.extend(predict(model, &x)?);
    }
    Ok(out)
}

/// Mean cross-entropy over the whole dataset.
pub fn dataset_loss(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in dataset.batches(EVAL_CHUNK, 0, false) {
        let (x, y) = dataset.batch(&chunk)?;
        let (loss, _) = softmax_cross_entropy(&infer(model, &x)?, &y)?;
        total += f64::from(loss) * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassCount>,
}

impl Evaluation {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_class = vec![ClassCount { correct: 0, total: 0 }; classes];
        let mut correct = 0;
        for (&p, &l) in predictions.iter().zip(labels) {
            per_class[l].total += 1;
            if p == l {
                per_class[l].correct += 1;
                correct += 1;
            }
        }
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            correct,
            total: labels.len(),
            per_class,
        })
    }
}

pub fn evaluate(model: &ModelState, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_dataset(model, dataset)?;
    Evaluation::from_predictions(&preds, &dataset.labels, dataset.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;
    use crate::model::{build_model, Architecture, LayerParams};
    use crate::numkernel::LayerSpec;

    fn zero_model(classes: usize) -> ModelState {
        let arch = Architecture {
            input_shape: [1, 2, 2],
            layers: vec![LayerSpec::conv(1, 1, 1), LayerSpec::Flatten, LayerSpec::linear(4, classes)],
            class_names: (0..classes).map(|c| c.to_string()).collect(),
        };
        let mut m = build_model(arch, 0).unwrap();
        for t in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn ties_predict_class_zero() {
        let m = zero_model(4);
        let x = Tensor::from_fn(&[3, 1, 2, 2], |i| i as f32);
        assert_eq!(predict(&m, &x).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn constant_predictor_on_balanced_set_scores_one_tenth() {
        let m = zero_model(10);
        let n = 50;
        let ds = Dataset::new(
            Tensor::zeros(&[n, 1, 2, 2]),
            (0..n).map(|i| i % 10).collect(),
            (0..10).map(|c| c.to_string()).collect(),
            Split::Test,
            (0..n).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let e = evaluate(&m, &ds).unwrap();
        assert!((e.accuracy - 0.1).abs() < 1e-12);
        assert_eq!(e.per_class[0], ClassCount { correct: 5, total: 5 });
    }

    #[test]
    fn hand_set_linear_predicts_expected_labels() {
        // conv is the identity on a 1x1x3 input; the linear head picks the
        // class from a hand-written weight matrix
        let arch = Architecture {
            input_shape: [1, 1, 3],
            layers: vec![LayerSpec::conv(1, 1, 1), LayerSpec::Flatten, LayerSpec::linear(3, 3)],
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let params = vec![
            Some(LayerParams {
                weights: Tensor::full(&[1, 1, 1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
            }),
            None,
            Some(LayerParams {
                weights: Tensor::new(
                    vec![3, 3],
                    vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                )
                .unwrap(),
                bias: Tensor::zeros(&[3]),
            }),
        ];
        let m = ModelState::from_parts(arch, params, 0).unwrap();
        let x = Tensor::new(
            vec![3, 1, 1, 3],
            vec![0.1, 0.2, 0.9, 0.8, 0.1, 0.0, 0.3, 0.5, 0.4],
        )
        .unwrap();
        assert_eq!(predict(&m, &x).unwrap(), vec![2, 0, 1]);
        let a = predict(&m, &x.select_axis0(&[0]).unwrap()).unwrap();
        let b = predict(&m, &x.select_axis0(&[1, 2]).unwrap()).unwrap();
        assert_eq!([a, b].concat(), vec![2, 0, 1]);
    }

    #[test]
    fn four_sample_accuracy() {
        let e = Evaluation::from_predictions(&[0, 1, 1, 0], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(e.accuracy, 0.75);
        assert!(Evaluation::from_predictions(&[], &[], 2).is_err());
    }
}
