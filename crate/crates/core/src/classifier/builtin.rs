use super::{softmax, Backend, ClassifierConfig, Examples, FitSummary, ProbMatrix, TrainedModel};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureVector, FeaturizerConfig, Vocabulary};

#[derive(Debug, Clone)]
enum Features {
    /// Posts carry precomputed dense vectors of this dimension.
    Dense(usize),
    Text(Vocabulary),
}

impl Features {
    fn dim(&self) -> usize {
        match self {
            Features::Dense(d) => *d,
            Features::Text(v) => v.len(),
        }
    }

    fn encode(&self, items: &Dataset) -> Result<Vec<FeatureVector>> {
        items
            .items()
            .iter()
            .map(|item| match self {
                Features::Dense(dim) => {
                    let values = item.post.features.as_ref().ok_or_else(|| {
                        Error::Invalid(format!(
                            "item {:?} has no features but the model was trained on dense features",
                            item.id()
                        ))
                    })?;
                    if values.len() != *dim {
                        return Err(Error::DimensionMismatch {
                            expected: *dim,
                            got: values.len(),
                        });
                    }
                    FeatureVector::dense(values)
                }
                Features::Text(vocab) => Ok(vocab.transform(&item.post.text)),
            })
            .collect()
    }
}

/// Softmax regression over bag-of-words features, or over the posts' own
/// `features` vectors when every training post has one.
#[derive(Debug, Clone)]
pub struct BuiltinBackend {
    config: ClassifierConfig,
    featurizer: FeaturizerConfig,
    fitted: Option<(Features, TrainedModel)>,
}

impl BuiltinBackend {
    pub fn new(config: ClassifierConfig, featurizer: FeaturizerConfig) -> Self {
        Self {
            config,
            featurizer,
            fitted: None,
        }
    }

    pub fn model(&self) -> Option<&TrainedModel> {
        self.fitted.as_ref().map(|f| &f.1)
    }
}

impl Backend for BuiltinBackend {
    fn describe(&self) -> String {
        "builtin softmax regression".into()
    }

    fn fit(&mut self, train: &Dataset, validation: &Dataset) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let dense_dim = train.items()[0].post.features.as_ref().map(Vec::len);
        let features = match dense_dim {
            Some(d) if train.items().iter().all(|i| i.post.features.is_some()) => Features::Dense(d),
            _ => Features::Text(Vocabulary::fit(
                train.items().iter().map(|i| i.post.text.as_str()),
                &self.featurizer,
            )?),
        };
        let x = features.encode(train)?;
        let y = train.labels()?;
        let weights = self.config.class_weights.resolve(&train.class_counts()?)?;
        let (vx, vy) = if validation.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (features.encode(validation)?, validation.labels()?)
        };
        let model = softmax::train(
            Examples::new(&x, &y)?,
            Some(Examples::new(&vx, &vy)?),
            features.dim(),
            train.num_classes(),
            &weights,
            &self.config,
        )?;
        let summary = FitSummary {
            val_accuracy: model.best_val_accuracy(),
        };
        self.fitted = Some((features, model));
        Ok(summary)
    }

    fn predict_proba(&mut self, items: &Dataset) -> Result<ProbMatrix> {
        let (features, model) = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::Invalid("predict_proba called before fit".into()))?;
        model.predict_proba(&features.encode(items)?)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{Item, LabelSchema, Origin, Post};

    fn dataset(rows: &[(&str, &str, usize)]) -> Dataset {
        let schema = Arc::new(LabelSchema::new(&["neg", "pos"]).unwrap());
        let items = rows
            .iter()
            .map(|(id, text, c)| Item::labeled(Post::new(*id, *text), *c, Origin::GroundTruth))
            .collect();
        Dataset::new(schema, items).unwrap()
    }

    #[test]
    fn learns_keywords_from_text() {
        let train = dataset(&[
            ("a", "awful bad terrible", 0),
            ("b", "bad awful day", 0),
            ("c", "terrible bad mood", 0),
            ("d", "great good happy", 1),
            ("e", "good great day", 1),
            ("f", "happy good mood", 1),
        ]);
        let mut backend = BuiltinBackend::new(ClassifierConfig::default(), FeaturizerConfig::default());
        assert!(backend.predict_proba(&train).is_err());
        let summary = backend.fit(&train, &train).unwrap();
        assert_eq!(summary.val_accuracy, Some(1.0));
        let probe = dataset(&[("x", "so bad", 0), ("y", "very good", 1)]).without_labels();
        assert_eq!(backend.predict_proba(&probe).unwrap().predictions(), vec![0, 1]);
    }

    #[test]
    fn dense_features_bypass_the_featurizer() {
        let schema = Arc::new(LabelSchema::new(&["neg", "pos"]).unwrap());
        let mk = |id: &str, f: Vec<f64>, c| {
            let mut post = Post::new(id, "");
            post.features = Some(f);
            Item::labeled(post, c, Origin::GroundTruth)
        };
        let train = Dataset::new(
            schema.clone(),
            vec![
                mk("a", vec![-1.0, -1.0], 0),
                mk("b", vec![1.0, 1.0], 1),
                mk("c", vec![-2.0, -1.0], 0),
            ],
        )
        .unwrap();
        let mut backend = BuiltinBackend::new(ClassifierConfig::default(), FeaturizerConfig::default());
        backend.fit(&train, &Dataset::empty(schema.clone())).unwrap();
        assert_eq!(backend.model().unwrap().dim(), 2);
        let wrong = Dataset::new(schema, vec![mk("z", vec![1.0], 0)]).unwrap();
        assert!(backend.predict_proba(&wrong).is_err());
    }
}
