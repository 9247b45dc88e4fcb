//! Browser bindings. Every export takes plain numbers or strings and returns
//! a JSON string; the logic lives in [`demo`] so it can be tested natively.

use wasm_bindgen::prelude::*;

pub mod demo;

fn to_js<T: serde::Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Square crop for a box in an image, after dilation.
#[wasm_bindgen]
pub fn crop(x: f64, y: f64, w: f64, h: f64, image_width: u32, image_height: u32, dilation: f64) -> Result<String, JsError> {
    to_js(demo::crop([x, y, w, h], (image_width, image_height), dilation))
}

/// Relationships found in a caption, with concreteness from the bundled table.
#[wasm_bindgen]
pub fn parse_caption(text: &str, threshold: f64) -> Result<String, JsError> {
    to_js(Ok(demo::parse_caption(text, threshold)))
}

/// Trains the Combiner on the block-replacement task and compares it with
/// the baselines.
#[wasm_bindgen]
pub fn train_blocks(steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Result<String, JsError> {
    to_js(demo::train_blocks(&demo::BlockRun { steps, batch_size, learning_rate, seed }))
}
