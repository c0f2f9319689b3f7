use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use super::header::{target_tensor_name, visual_tensor_name, DumpHeader, FeatureKind, TensorRole};
use super::{pack_dump, read_dump, Dump, DumpError, Tensor};

/// Typed access to the token features of a dump.
///
/// Holds one `(n_visual, d)` matrix per layer and one `(s+1, d)` matrix per
/// target and layer, for every feature kind present. The header's
/// `feature_kind` set must be complete; a second kind may ride along for
/// ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDump {
    pub header: DumpHeader,
    visual: BTreeMap<(FeatureKind, usize), Array2<f32>>,
    targets: BTreeMap<(FeatureKind, u32, usize), Array2<f32>>,
}

fn to_array(t: Tensor) -> Array2<f32> {
    let (rows, cols) = (t.shape[0], t.shape[1]);
    Array2::from_shape_vec((rows, cols), t.data).expect("validated shape")
}

impl TokenDump {
    /// Starts an empty dump; features are added with [`insert_visual`] and [`insert_target`].
    ///
    /// [`insert_visual`]: TokenDump::insert_visual
    /// [`insert_target`]: TokenDump::insert_target
    pub fn new(mut header: DumpHeader) -> Self {
        header.tensor_index.clear();
        Self {
            header,
            visual: BTreeMap::new(),
            targets: BTreeMap::new(),
        }
    }

    pub fn insert_visual(&mut self, kind: FeatureKind, layer: usize, features: Array2<f32>) {
        self.visual.insert((kind, layer), features);
    }

    pub fn insert_target(
        &mut self,
        kind: FeatureKind,
        target_id: u32,
        layer: usize,
        features: Array2<f32>,
    ) {
        self.targets.insert((kind, target_id, layer), features);
    }

    pub fn from_dump(dump: &Dump) -> Result<Self, DumpError> {
        let mut out = TokenDump::new(dump.header.clone());
        for entry in &dump.header.tensor_index {
            match TensorRole::parse(&entry.name) {
                TensorRole::Visual { kind, layer } => {
                    out.insert_visual(kind, layer, to_array(dump.tensor(&entry.name)?));
                }
                TensorRole::Target {
                    kind,
                    target_id,
                    layer,
                } => {
                    out.insert_target(kind, target_id, layer, to_array(dump.tensor(&entry.name)?));
                }
                TensorRole::RelevanceMap { .. } | TensorRole::Other => {}
            }
        }
        out.check_complete(out.header.feature_kind)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, DumpError> {
        Self::from_dump(&read_dump(bytes)?)
    }

    /// Errors unless every layer and target has features of `kind`.
    pub fn check_complete(&self, kind: FeatureKind) -> Result<(), DumpError> {
        for &layer in &self.header.layers {
            if !self.visual.contains_key(&(kind, layer)) {
                return Err(DumpError::MissingTensor(visual_tensor_name(kind, layer)));
            }
            for t in &self.header.targets {
                if !self.targets.contains_key(&(kind, t.target_id, layer)) {
                    return Err(DumpError::MissingTensor(target_tensor_name(
                        kind,
                        t.target_id,
                        layer,
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_kind(&self, kind: FeatureKind) -> bool {
        self.check_complete(kind).is_ok()
    }

    pub fn visual(
        &self,
        kind: FeatureKind,
        layer: usize,
    ) -> Result<ArrayView2<'_, f32>, DumpError> {
        self.visual
            .get(&(kind, layer))
            .map(|a| a.view())
            .ok_or_else(|| DumpError::MissingTensor(visual_tensor_name(kind, layer)))
    }

    pub fn target_tokens(
        &self,
        kind: FeatureKind,
        target_id: u32,
        layer: usize,
    ) -> Result<ArrayView2<'_, f32>, DumpError> {
        self.targets
            .get(&(kind, target_id, layer))
            .map(|a| a.view())
            .ok_or_else(|| DumpError::MissingTensor(target_tensor_name(kind, target_id, layer)))
    }

    /// Named tensors in a fixed order: visual features, then target features.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let flat = |a: &Array2<f32>| Tensor {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        };
        let visual = self
            .visual
            .iter()
            .map(|(&(kind, layer), a)| (visual_tensor_name(kind, layer), flat(a)));
        let targets = self
            .targets
            .iter()
            .map(|(&(kind, id, layer), a)| (target_tensor_name(kind, id, layer), flat(a)));
        visual.chain(targets).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DumpError> {
        pack_dump(self.header.clone(), &self.to_tensors())
    }
}
