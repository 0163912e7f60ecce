//! Adapter for external editing systems.
//!
//! An external editor proposes layer deltas for a request; the adapter
//! applies them, re-verifies success with the built-in check (never trusting
//! the invoker), and reports the same outcome shape as the built-in editors.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{check_edit_success, DeltaSummary, EditOutcome, EditorError};
use crate::dataset::EditRequest;
use crate::gateway::{apply_delta, LayerDelta, ModelBackend};

pub trait ExternalEditor: Send {
    fn name(&self) -> &str;

    /// Computes the deltas for one edit without mutating the model.
    fn propose(
        &mut self,
        model: &dyn ModelBackend,
        request: &EditRequest,
    ) -> Result<Vec<LayerDelta>, String>;
}

#[derive(Default)]
pub struct ExternalRegistry {
    editors: BTreeMap<String, Box<dyn ExternalEditor>>,
}

impl ExternalRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, editor: Box<dyn ExternalEditor>) {
        self.editors.insert(editor.name().to_string(), editor);
    }

    pub fn names(&self) -> Vec<String> {
        self.editors.keys().cloned().collect()
    }

    pub fn apply_external_edit(
        &mut self,
        model: &mut dyn ModelBackend,
        request: &EditRequest,
        name: &str,
    ) -> Result<EditOutcome, EditorError> {
        let started = Instant::now();
        let editor = self
            .editors
            .get_mut(name)
            .ok_or_else(|| EditorError::Config(format!("no external editor named {name:?}")))?;
        let deltas = editor
            .propose(model, request)
            .map_err(|message| EditorError::Failure {
                name: name.to_string(),
                case_id: request.case_id.clone(),
                message,
            })?;
        let mut summaries = Vec::with_capacity(deltas.len());
        for delta in &deltas {
            summaries.push(DeltaSummary::of(delta));
            apply_delta(model, delta)?;
        }
        let success = check_edit_success(model, request)?;
        Ok(EditOutcome {
            case_id: request.case_id.clone(),
            editor: name.to_string(),
            success,
            deltas: summaries,
            wall_time: started.elapsed(),
        })
    }
}
