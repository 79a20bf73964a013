use std::path::Path;

use hsib_models::{load_checkpoint_for, ModelGraph};

use crate::error::Result;

/// Pretrained teachers, frozen and in evaluation mode.
///
/// Their parameters enter every tape as constants, so a student's backward
/// pass can never reach them.
#[derive(Debug, Clone, Default)]
pub struct TeacherBundle {
    teachers: Vec<ModelGraph<f32>>,
}

impl TeacherBundle {
    pub fn new(teachers: Vec<ModelGraph<f32>>) -> Self {
        let teachers = teachers
            .into_iter()
            .map(|mut t| {
                t.set_trainable(false);
                t.set_training(false);
                t
            })
            .collect();
        Self { teachers }
    }

    pub fn single(teacher: ModelGraph<f32>) -> Self {
        Self::new(vec![teacher])
    }

    pub fn load(paths: &[impl AsRef<Path>], classes: usize) -> Result<Self> {
        let teachers = paths
            .iter()
            .map(|p| Ok(load_checkpoint_for(p.as_ref(), classes)?.0))
            .collect::<Result<_>>()?;
        Ok(Self::new(teachers))
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn teachers(&self) -> &[ModelGraph<f32>] {
        &self.teachers
    }
}
