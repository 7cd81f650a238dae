//! ShapeStories: a procedural story dataset with a fixed glyph roster,
//! recurring scenes and templated prompts.

mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub use render::{
    cell_origin, contact_sheet, encode_png_rgb, render_frame, roster, scene_catalog, CharacterSpec, GlyphShape, Image,
    SceneSpec, ACTION_COLORS, FRAME_SIZE,
};

pub const ACTIONS: [&str; 8] = ["talking", "running", "sitting", "playing", "eating", "reading", "laughing", "waiting"];
const REVISIT_SAME_CAST: f64 = 0.7;
const FILLER: [&str; 9] = ["is", "are", "in", "the", "and", ",", "together", "at", "now"];

/// Every token a generated prompt can contain, in a fixed order.
pub fn vocabulary() -> Vec<String> {
    let names = roster(9).expect("full roster").into_iter().map(|c| c.name);
    let scenes = scene_catalog().into_iter().map(|s| s.name);
    FILLER
        .iter()
        .map(|s| s.to_string())
        .chain(names)
        .chain(scenes)
        .chain(ACTIONS.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Roster size presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RosterProfile {
    #[default]
    Pororo,
    Flintstones,
}

impl RosterProfile {
    pub fn size(self) -> usize {
        match self {
            RosterProfile::Pororo => 9,
            RosterProfile::Flintstones => 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub story_len: usize,
    pub roster: RosterProfile,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { n_train: 2000, n_valid: 200, n_test: 200, story_len: 5, roster: RosterProfile::Pororo, seed: 7 }
    }
}

impl DatasetParams {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return Err(Error::Invalid("every split needs at least one story".into()));
        }
        if self.story_len < 2 {
            return Err(Error::Invalid(format!("story_len must be >= 2, got {}", self.story_len)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub prompt: String,
    /// Sorted, non-empty roster ids.
    pub characters: Vec<usize>,
    pub scene_id: usize,
    /// Index into [`ACTIONS`].
    pub action: usize,
    pub pose_seed: u64,
    pub image: Image,
}

impl Frame {
    pub fn tokens(&self) -> Vec<&str> {
        self.prompt.split_whitespace().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoryRecord {
    pub story_id: String,
    pub frames: Vec<Frame>,
}

impl StoryRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index pairs `(i, j)` with `i < j` showing the same scene.
    pub fn repeated_scene_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.frames.len() {
            for i in 0..j {
                if self.frames[i].scene_id == self.frames[j].scene_id {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Whether frame `k` has an earlier, non-adjacent frame with the same scene.
    pub fn has_distant_scene_match(&self, k: usize) -> bool {
        k >= 2 && self.frames[..k - 1].iter().any(|f| f.scene_id == self.frames[k].scene_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: DatasetParams,
    pub split: BTreeMap<Split, Vec<String>>,
    pub roster: Vec<CharacterSpec>,
    pub scenes: Vec<SceneSpec>,
    /// Story id to sha256 of its `story.json`.
    pub stories: BTreeMap<String, String>,
}

/// A generated or loaded dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stories: BTreeMap<String, StoryRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&StoryRecord> {
        self.manifest.split[&split].iter().map(|id| &self.stories[id]).collect()
    }

    pub fn story(&self, id: &str) -> Result<&StoryRecord> {
        self.stories.get(id).ok_or_else(|| Error::Data(format!("unknown story id `{id}`")))
    }

    pub fn roster(&self) -> &[CharacterSpec] {
        &self.manifest.roster
    }

    /// Fraction of frames at position 3 or later that share their scene with a
    /// non-adjacent earlier frame.
    pub fn dependency_fraction(&self, split: Split) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for s in self.split(split) {
            for k in 2..s.len() {
                total += 1;
                hit += s.has_distant_scene_match(k) as usize;
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

pub fn story_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

fn scene_plan(rng: &mut impl Rng, len: usize, n_scenes: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_scenes).collect();
    pool.shuffle(rng);
    loop {
        let k = if len >= 4 { rng.random_range(2..=3) } else { 2 };
        let chosen = &pool[..k];
        let mut plan: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let s = if i >= 2 && rng.random_bool(0.6) {
                plan[rng.random_range(0..i - 1)]
            } else {
                *chosen.choose(rng).expect("non-empty")
            };
            plan.push(s);
        }
        let uses_all = chosen.iter().all(|s| plan.contains(s));
        let distant_repeat = len < 3 || (2..len).any(|j| plan[..j - 1].contains(&plan[j]));
        let has_unique = plan.iter().any(|s| plan.iter().filter(|&&x| x == *s).count() == 1);
        if uses_all && distant_repeat && has_unique {
            return plan;
        }
    }
}

fn prompt(
    rng: &mut impl Rng,
    roster: &[CharacterSpec],
    scenes: &[SceneSpec],
    chars: &[usize],
    scene: usize,
    action: usize,
) -> String {
    let mut names: Vec<&str> = chars.iter().map(|&c| roster[c].name.as_str()).collect();
    names.shuffle(rng);
    let act = ACTIONS[action];
    let place = &scenes[scene].name;
    let late = rng.random_bool(0.5);
    match (names.as_slice(), late) {
        ([a], false) => format!("{a} is {act} in the {place}"),
        ([a], true) => format!("in the {place} {a} is {act} now"),
        ([a, b], false) => format!("{a} and {b} are {act} in the {place}"),
        ([a, b], true) => format!("at the {place} {a} and {b} are {act} together"),
        ([a, b, c], false) => format!("{a} , {b} and {c} are {act} together in the {place}"),
        ([a, b, c], true) => format!("in the {place} {a} , {b} and {c} are {act}"),
        _ => unreachable!("frames carry one to three characters"),
    }
}

/// Generate one story; depends only on `(seed, split, index)`.
pub fn generate_story(
    params: &DatasetParams,
    roster: &[CharacterSpec],
    scenes: &[SceneSpec],
    split: Split,
    index: usize,
) -> Result<StoryRecord> {
    let id = story_id(split, index);
    let mut rng = seeds::rng(params.seed, &format!("story/{}", split.name()), index as u64);
    let cast_size = rng.random_range(2..=4.min(roster.len()));
    let mut ids: Vec<usize> = (0..roster.len()).collect();
    ids.shuffle(&mut rng);
    let cast = &ids[..cast_size];
    let plan = scene_plan(&mut rng, params.story_len, scenes.len());
    let mut frames = Vec::with_capacity(params.story_len);
    for (k, &scene_id) in plan.iter().enumerate() {
        let n = rng.random_range(1..=3.min(cast.len()));
        let mut chars: Vec<usize> = cast.choose_multiple(&mut rng, n).copied().collect();
        chars.sort_unstable();
        // Revisited scenes usually bring back the same group.
        let revisit = frames.iter().rev().find(|f: &&Frame| f.scene_id == scene_id);
        if let Some(prev) = revisit {
            if rng.random_bool(REVISIT_SAME_CAST) {
                chars = prev.characters.clone();
            }
        }
        let action = rng.random_range(0..ACTIONS.len());
        let text = prompt(&mut rng, roster, scenes, &chars, scene_id, action);
        let pose_seed = seeds::derive(params.seed, &id, k as u64);
        let image = render_frame(roster, scenes, &chars, scene_id, Some(action), pose_seed)?;
        frames.push(Frame { prompt: text, characters: chars, scene_id, action, pose_seed, image });
    }
    Ok(StoryRecord { story_id: id, frames })
}

pub fn generate_dataset(params: &DatasetParams) -> Result<Dataset> {
    params.validate()?;
    let roster = roster(params.roster.size())?;
    let scenes = scene_catalog();
    let mut split = BTreeMap::new();
    let mut stories = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for s in Split::ALL {
        let mut ids = Vec::with_capacity(params.count(s));
        for i in 0..params.count(s) {
            let story = generate_story(params, &roster, &scenes, s, i)?;
            checksums.insert(story.story_id.clone(), seeds::sha256_hex(&story_json(&story)?));
            ids.push(story.story_id.clone());
            stories.insert(story.story_id.clone(), story);
        }
        split.insert(s, ids);
    }
    let manifest = DatasetManifest { seed: params.seed, params: *params, split, roster, scenes, stories: checksums };
    Ok(Dataset { manifest, stories })
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    prompt: String,
    characters: Vec<usize>,
    scene_id: usize,
    action: usize,
    pose_seed: u64,
    png_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct StoryFile {
    story_id: String,
    frames: Vec<FrameFile>,
}

fn story_json(story: &StoryRecord) -> Result<Vec<u8>> {
    let file = StoryFile {
        story_id: story.story_id.clone(),
        frames: story
            .frames
            .iter()
            .map(|f| {
                Ok(FrameFile {
                    prompt: f.prompt.clone(),
                    characters: f.characters.clone(),
                    scene_id: f.scene_id,
                    action: f.action,
                    pose_seed: f.pose_seed,
                    png_sha256: seeds::sha256_hex(&f.image.encode_png()?),
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok(serde_json::to_vec_pretty(&file)?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `dir/story.json` and `dir/frames/<k>.png`.
pub fn save_story(story: &StoryRecord, dir: &Path) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for (k, f) in story.frames.iter().enumerate() {
        write(&frames.join(format!("{k}.png")), &f.image.encode_png()?)?;
    }
    write(&dir.join("story.json"), &story_json(story)?)
}

pub fn load_story(dir: &Path) -> Result<StoryRecord> {
    let file: StoryFile = serde_json::from_slice(&read(&dir.join("story.json"))?)
        .map_err(|e| Error::Data(format!("{}: malformed story.json: {e}", dir.display())))?;
    if file.frames.len() < 2 {
        return Err(Error::Data(format!("story {} has {} frames; at least 2 required", file.story_id, file.frames.len())));
    }
    let mut frames = Vec::with_capacity(file.frames.len());
    for (k, f) in file.frames.into_iter().enumerate() {
        let path = dir.join("frames").join(format!("{k}.png"));
        let bytes = fs::read(&path).map_err(|e| Error::Frame { index: k, reason: format!("{}: {e}", path.display()) })?;
        if seeds::sha256_hex(&bytes) != f.png_sha256 {
            return Err(Error::Frame { index: k, reason: "png checksum mismatch".into() });
        }
        let image = Image::decode_png(&bytes).map_err(|e| Error::Frame { index: k, reason: e.to_string() })?;
        if f.characters.is_empty() {
            return Err(Error::Frame { index: k, reason: "empty character set".into() });
        }
        frames.push(Frame {
            prompt: f.prompt,
            characters: f.characters,
            scene_id: f.scene_id,
            action: f.action,
            pose_seed: f.pose_seed,
            image,
        });
    }
    Ok(StoryRecord { story_id: file.story_id, frames })
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    for (id, story) in &data.stories {
        save_story(story, &dir.join("stories").join(id))?;
    }
    write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&data.manifest)?)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    serde_json::from_slice(&read(&dir.join("manifest.json"))?)
        .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", dir.display())))
}

/// Load every story listed in the manifest, verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut stories = BTreeMap::new();
    for (id, sum) in &manifest.stories {
        let sdir = dir.join("stories").join(id);
        let actual = seeds::sha256_hex(&read(&sdir.join("story.json"))?);
        if &actual != sum {
            return Err(Error::Checksum(format!("story {id}")));
        }
        let story = load_story(&sdir).map_err(|e| Error::Data(format!("story {id}: {e}")))?;
        stories.insert(id.clone(), story);
    }
    for ids in manifest.split.values() {
        if let Some(missing) = ids.iter().find(|id| !stories.contains_key(*id)) {
            return Err(Error::Data(format!("split lists unknown story `{missing}`")));
        }
    }
    Ok(Dataset { manifest, stories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetParams {
        DatasetParams { n_train: 40, n_valid: 8, n_test: 8, ..Default::default() }
    }

    /// Nearest sky/ground palette over the untouched top and bottom rows.
    fn palette_scene(img: &Image, scenes: &[SceneSpec]) -> usize {
        let dist = |a: [u8; 3], b: [u8; 3]| a.iter().zip(b).map(|(&x, y)| (x as i32 - y as i32).pow(2)).sum::<i32>();
        let mut best = (i32::MAX, 0);
        for s in scenes {
            let d: i32 = (0..FRAME_SIZE).map(|x| dist(img.pixel(x, 0), s.sky) + dist(img.pixel(x, FRAME_SIZE - 1), s.ground)).sum();
            best = best.min((d, s.id));
        }
        best.1
    }

    /// Template matching at every jitter offset of every home cell.
    fn glyph_oracle(img: &Image, roster: &[CharacterSpec]) -> Vec<usize> {
        roster
            .iter()
            .filter(|c| {
                let (ox, oy) = cell_origin(c.cell);
                (-1i32..=1).any(|dy| {
                    (-1i32..=1).any(|dx| {
                        (0..8).all(|gy| {
                            (0..8).all(|gx| {
                                !c.shape.covers(gx, gy)
                                    || img.pixel((ox as i32 + dx) as usize + gx, (oy as i32 + dy) as usize + gy) == c.color
                            })
                        })
                    })
                })
            })
            .map(|c| c.id)
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.stories, b.stories);
        let c = generate_dataset(&DatasetParams { seed: 8, ..small() }).unwrap();
        assert_ne!(a.manifest.stories, c.manifest.stories);
    }

    #[test]
    fn structural_postconditions_hold() {
        let d = generate_dataset(&DatasetParams { n_train: 300, ..small() }).unwrap();
        for s in d.stories.values() {
            assert_eq!(s.len(), 5);
            let scenes: Vec<usize> = s.frames.iter().map(|f| f.scene_id).collect();
            let mut distinct = scenes.clone();
            distinct.sort_unstable();
            distinct.dedup();
            assert!((2..=3).contains(&distinct.len()), "{scenes:?}");
            assert!((2..5).any(|k| s.has_distant_scene_match(k)), "{scenes:?}");
            assert!(scenes.iter().any(|x| scenes.iter().filter(|&y| y == x).count() == 1), "{scenes:?}");
            for f in &s.frames {
                let n = f.tokens().len();
                assert!((6..=14).contains(&n), "{}", f.prompt);
                assert!(!f.characters.is_empty() && f.characters.len() <= 3);
                for name in f.characters.iter().map(|&c| &d.roster()[c].name) {
                    assert!(f.tokens().contains(&name.as_str()));
                }
                assert!(f.tokens().contains(&d.manifest.scenes[f.scene_id].name.as_str()));
                assert!(f.tokens().contains(&ACTIONS[f.action]));
            }
        }
        for split in Split::ALL {
            assert!(d.dependency_fraction(split) >= 0.6, "{split:?}: {}", d.dependency_fraction(split));
        }
        let all: Vec<&String> = d.manifest.split.values().flatten().collect();
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), all.len());
    }

    #[test]
    fn pixel_oracles_recover_labels() {
        let d = generate_dataset(&small()).unwrap();
        for s in d.stories.values() {
            for f in &s.frames {
                assert_eq!(glyph_oracle(&f.image, d.roster()), f.characters);
                assert_eq!(palette_scene(&f.image, &d.manifest.scenes), f.scene_id);
                let horizon = d.manifest.scenes[f.scene_id].horizon;
                assert_eq!(f.image.pixel(0, horizon), ACTION_COLORS[f.action]);
                assert_eq!(f.image.pixel(FRAME_SIZE - 1, horizon - 1), ACTION_COLORS[f.action]);
            }
        }
    }

    #[test]
    fn pose_seed_moves_glyphs_but_not_the_scene() {
        let r = roster(9).unwrap();
        let sc = scene_catalog();
        let empty = render_frame(&r, &sc, &[], 0, None, 1).unwrap();
        assert_eq!(empty, render_frame(&r, &sc, &[], 0, None, 1).unwrap());
        let a = render_frame(&r, &sc, &[1, 5], 2, Some(0), 1).unwrap();
        let differs = (2..40).any(|seed| render_frame(&r, &sc, &[1, 5], 2, Some(0), seed).unwrap() != a);
        assert!(differs);
        for seed in 0..20 {
            assert_eq!(palette_scene(&render_frame(&r, &sc, &[0, 3, 8], 2, Some(seed as usize % 8), seed).unwrap(), &sc), 2);
        }
        assert_eq!(r.len(), 9);
    }

    #[test]
    fn table_one_profile_sizes() {
        let p = DatasetParams { n_train: 10191, n_valid: 2334, n_test: 2208, ..Default::default() };
        assert_eq!(Split::ALL.map(|s| p.count(s)), [10191, 2334, 2208]);
    }

    #[test]
    fn save_load_round_trip_and_error_contracts() {
        let d = generate_dataset(&DatasetParams { n_train: 3, n_valid: 1, n_test: 1, ..Default::default() }).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_dataset(&d, tmp.path()).unwrap();
        let back = load_dataset(tmp.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.stories, d.stories);

        let sdir = tmp.path().join("stories").join("train-00001");
        let png = sdir.join("frames").join("3.png");
        let bytes = fs::read(&png).unwrap();
        fs::write(&png, &bytes[..bytes.len() / 2]).unwrap();
        match load_story(&sdir) {
            Err(Error::Frame { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected frame error, got {other:?}"),
        }
        fs::remove_file(&png).unwrap();
        assert!(matches!(load_story(&sdir), Err(Error::Frame { index: 3, .. })));

        let short = StoryRecord { story_id: "x".into(), frames: d.stories["train-00000"].frames[..1].to_vec() };
        let sdir = tmp.path().join("short");
        save_story(&short, &sdir).unwrap();
        assert!(load_story(&sdir).is_err());

        fs::write(tmp.path().join("manifest.json"), b"{\"seed\": 1").unwrap();
        assert!(matches!(load_dataset(tmp.path()), Err(Error::Data(_))));
    }

    #[test]
    fn vocabulary_covers_all_prompts() {
        let v = vocabulary();
        let d = generate_dataset(&small()).unwrap();
        for s in d.stories.values() {
            for f in &s.frames {
                for t in f.tokens() {
                    assert!(v.iter().any(|w| w == t), "{t}");
                }
            }
        }
    }
}
