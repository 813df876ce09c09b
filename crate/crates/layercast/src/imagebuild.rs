//! Build recipes and the three in-container build techniques: self-contained
//! (single stage), multi-stage with artifact copying, and squashing.
//!
//! Recipes use a line-oriented Buildfile format:
//!
//! ```text
//! FROM <name:tag|scratch> [AS <stage_name>]
//! ADD <path> <size> <content_id>
//! DEL <path>
//! RUN <label> { ADD ...; DEL ...; ... }
//! COPY --from=<stage_name> <path> [<path>...]
//! ```
//!
//! Every instruction appends exactly one layer; a `RUN` group models a
//! multi-action step as a single layer.

use std::collections::BTreeSet;
use std::collections::HashMap;

use thiserror::Error;

use crate::layerfs::{
    self, diff, materialize, FileEntry, FileSystemView, Layer, LayerError, LayerOp,
};

/// The designated empty base image reference.
pub const SCRATCH: &str = "scratch";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown stage `{name}` (stages can only copy from earlier stages)")]
    UnknownStage { line: usize, name: String },
    #[error("line {line}: duplicate stage name `{name}`")]
    DuplicateStage { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("unresolved base image `{reference}`")]
    UnresolvedBase { reference: String },
    #[error("copy source `{path}` is absent in stage `{stage}`")]
    MissingCopySource { stage: String, path: String },
    #[error("unknown copy-from stage `{name}`")]
    UnknownStage { name: String },
    #[error("invalid image name or tag `{value}`")]
    InvalidName { value: String },
    #[error("invalid image reference `{reference}` (expected `name:tag` or `scratch`)")]
    InvalidReference { reference: String },
    #[error("image `{name}` has no layers and is not the scratch base")]
    EmptyImage { name: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

fn valid_name(value: &str) -> bool {
    !value.is_empty()
        && value
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | '_' | '-'))
        && !value.chars().all(|c| c == '.')
}

/// Splits `name:tag`. `scratch` is not a registry reference and is rejected.
pub fn parse_reference(reference: &str) -> Result<(&str, &str), BuildError> {
    let invalid = || BuildError::InvalidReference {
        reference: reference.to_string(),
    };
    let (name, tag) = reference.split_once(':').ok_or_else(invalid)?;
    if !valid_name(name) || !valid_name(tag) {
        return Err(invalid());
    }
    Ok((name, tag))
}

/// A named, tagged, ordered list of layers. Only the scratch base may be
/// empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    name: String,
    tag: String,
    layers: Vec<Layer>,
}

impl Image {
    pub fn new(
        name: impl Into<String>,
        tag: impl Into<String>,
        layers: Vec<Layer>,
    ) -> Result<Image, BuildError> {
        let name = name.into();
        let tag = tag.into();
        if !valid_name(&name) {
            return Err(BuildError::InvalidName { value: name });
        }
        if !valid_name(&tag) {
            return Err(BuildError::InvalidName { value: tag });
        }
        if layers.is_empty() && name != SCRATCH {
            return Err(BuildError::EmptyImage { name });
        }
        Ok(Image { name, tag, layers })
    }

    /// The empty base every build chain bottoms out at.
    pub fn scratch() -> Image {
        Image {
            name: SCRATCH.to_string(),
            tag: "latest".to_string(),
            layers: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn reference(&self) -> String {
        format!("{}:{}", self.name, self.tag)
    }

    pub fn with_tag(&self, tag: impl Into<String>) -> Result<Image, BuildError> {
        Image::new(self.name.clone(), tag, self.layers.clone())
    }
}

/// One build instruction; each produces exactly one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    AddFile(FileEntry),
    DeleteFile(String),
    CopyFrom { stage: String, paths: Vec<String> },
    Group { label: String, ops: Vec<LayerOp> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: Option<String>,
    pub base_ref: String,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildRecipe {
    pub stages: Vec<Stage>,
}

fn syntax(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_add(tokens: &[&str], line: usize) -> Result<FileEntry, ParseError> {
    let [path, size, content_id] = tokens else {
        return Err(syntax(line, "ADD expects `<path> <size> <content_id>`"));
    };
    let size: u64 = size
        .parse()
        .map_err(|_| syntax(line, format!("invalid size `{size}`")))?;
    FileEntry::new(*path, size, *content_id).map_err(|e| syntax(line, e.to_string()))
}

fn parse_group(rest: &str, line: usize) -> Result<Instruction, ParseError> {
    let Some((head, body)) = rest.split_once('{') else {
        return Err(syntax(line, "RUN expects `<label> { ... }`"));
    };
    let label = head.trim();
    if label.is_empty() || label.split_whitespace().count() != 1 || !valid_name(label) {
        return Err(syntax(line, format!("invalid RUN label `{label}`")));
    }
    let Some(body) = body.trim_end().strip_suffix('}') else {
        return Err(syntax(line, "RUN group must end with `}`"));
    };
    let mut ops = Vec::new();
    for part in body.split(';') {
        let tokens: Vec<&str> = part.split_whitespace().collect();
        match tokens.split_first() {
            Some((&"ADD", args)) => ops.push(LayerOp::Add(parse_add(args, line)?)),
            Some((&"DEL", args)) => {
                let [path] = args else {
                    return Err(syntax(line, "DEL expects `<path>`"));
                };
                layerfs::validate_path(path).map_err(|e| syntax(line, e.to_string()))?;
                ops.push(LayerOp::Delete(path.to_string()));
            }
            Some((other, _)) => {
                return Err(syntax(line, format!("unknown op `{other}` in RUN group")))
            }
            None => return Err(syntax(line, "empty op in RUN group")),
        }
    }
    if ops.is_empty() {
        return Err(syntax(line, "RUN group must contain at least one op"));
    }
    Ok(Instruction::Group {
        label: label.to_string(),
        ops,
    })
}

/// Parses Buildfile text. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_recipe(text: &str) -> Result<BuildRecipe, ParseError> {
    let mut stages: Vec<Stage> = Vec::new();
    let mut names: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (directive, rest) = trimmed
            .split_once(char::is_whitespace)
            .unwrap_or((trimmed, ""));
        let rest = rest.trim();

        if directive == "FROM" {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            let (base_ref, name) = match tokens.as_slice() {
                [base] => (*base, None),
                [base, "AS", name] => (*base, Some(*name)),
                _ => return Err(syntax(line, "FROM expects `<ref> [AS <stage_name>]`")),
            };
            if base_ref != SCRATCH && parse_reference(base_ref).is_err() {
                return Err(syntax(line, format!("invalid base reference `{base_ref}`")));
            }
            if let Some(name) = name {
                if !valid_name(name) {
                    return Err(syntax(line, format!("invalid stage name `{name}`")));
                }
                if !names.insert(name.to_string()) {
                    return Err(ParseError::DuplicateStage {
                        line,
                        name: name.to_string(),
                    });
                }
            }
            stages.push(Stage {
                name: name.map(str::to_string),
                base_ref: base_ref.to_string(),
                instructions: Vec::new(),
            });
            continue;
        }

        if stages.is_empty() {
            return Err(syntax(line, format!("`{directive}` before any FROM")));
        }

        let instruction = match directive {
            "ADD" => {
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                Instruction::AddFile(parse_add(&tokens, line)?)
            }
            "DEL" => {
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                let [path] = tokens.as_slice() else {
                    return Err(syntax(line, "DEL expects `<path>`"));
                };
                layerfs::validate_path(path).map_err(|e| syntax(line, e.to_string()))?;
                Instruction::DeleteFile(path.to_string())
            }
            "RUN" => parse_group(rest, line)?,
            "COPY" => {
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                let Some((from, paths)) = tokens.split_first() else {
                    return Err(syntax(line, "COPY expects `--from=<stage> <path>...`"));
                };
                let Some(stage_name) = from.strip_prefix("--from=") else {
                    return Err(syntax(line, "COPY expects `--from=<stage>`"));
                };
                if paths.is_empty() {
                    return Err(syntax(line, "COPY expects at least one path"));
                }
                for path in paths {
                    layerfs::validate_path(path).map_err(|e| syntax(line, e.to_string()))?;
                }
                // Only earlier stages of this recipe may be referenced.
                if !stages[..stages.len() - 1]
                    .iter()
                    .any(|s| s.name.as_deref() == Some(stage_name))
                {
                    return Err(ParseError::UnknownStage {
                        line,
                        name: stage_name.to_string(),
                    });
                }
                Instruction::CopyFrom {
                    stage: stage_name.to_string(),
                    paths: paths.iter().map(|p| p.to_string()).collect(),
                }
            }
            other => return Err(syntax(line, format!("unknown directive `{other}`"))),
        };
        stages
            .last_mut()
            .expect("checked non-empty above")
            .instructions
            .push(instruction);
    }

    if stages.is_empty() {
        return Err(syntax(0, "recipe has no stages"));
    }
    Ok(BuildRecipe { stages })
}

/// The final image of a build plus the intermediate stage images, which are
/// kept local and not pushed.
#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub image: Image,
    pub stage_images: Vec<Image>,
}

/// Builds a recipe into an image named `name:tag`. `resolve` maps base image
/// references to images (typically backed by a registry); `scratch` resolves
/// internally to the empty base.
pub fn build<R>(
    recipe: &BuildRecipe,
    resolve: R,
    name: &str,
    tag: &str,
) -> Result<BuildOutput, BuildError>
where
    R: Fn(&str) -> Option<Image>,
{
    let mut stage_views: HashMap<&str, FileSystemView> = HashMap::new();
    let mut stage_images = Vec::new();
    let mut final_image = None;

    for (index, stage) in recipe.stages.iter().enumerate() {
        let mut layers = if stage.base_ref == SCRATCH {
            Vec::new()
        } else {
            resolve(&stage.base_ref)
                .ok_or_else(|| BuildError::UnresolvedBase {
                    reference: stage.base_ref.clone(),
                })?
                .layers()
                .to_vec()
        };

        for instruction in &stage.instructions {
            let ops = match instruction {
                Instruction::AddFile(entry) => vec![LayerOp::Add(entry.clone())],
                Instruction::DeleteFile(path) => vec![LayerOp::Delete(path.clone())],
                Instruction::Group { ops, .. } => ops.clone(),
                Instruction::CopyFrom { stage: src, paths } => {
                    let view = stage_views
                        .get(src.as_str())
                        .ok_or_else(|| BuildError::UnknownStage { name: src.clone() })?;
                    paths
                        .iter()
                        .map(|path| {
                            view.get(path)
                                .map(|entry| LayerOp::Add(entry.clone()))
                                .ok_or_else(|| BuildError::MissingCopySource {
                                    stage: src.clone(),
                                    path: path.clone(),
                                })
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            layers.push(Layer::new(ops)?);
        }

        if let Some(stage_name) = &stage.name {
            stage_views.insert(stage_name, materialize(&layers));
        }

        if index == recipe.stages.len() - 1 {
            final_image = Some(Image::new(name, tag, layers)?);
        } else {
            let stage_name = stage
                .name
                .clone()
                .unwrap_or_else(|| format!("stage-{index}"));
            stage_images.push(Image::new(stage_name, "build", layers)?);
        }
    }

    Ok(BuildOutput {
        image: final_image.expect("recipe has at least one stage"),
        stage_images,
    })
}

/// Flattens an image into a single monolithic layer holding exactly its
/// materialized view. Residual content (overwritten or deleted files) is
/// reclaimed; the tag gains a `-squashed` suffix.
pub fn squash(image: &Image) -> Image {
    let flat = diff(&FileSystemView::new(), &materialize(image.layers()));
    let layer = Layer::new(flat).expect("a materialized view diffs into a valid layer");
    Image::new(
        image.name().to_string(),
        format!("{}-squashed", image.tag()),
        vec![layer],
    )
    .expect("squashing a valid image yields a valid image")
}

/// Stored size of one image: sum over its unique layer digests.
pub fn image_size(image: &Image) -> u64 {
    let mut seen = BTreeSet::new();
    image
        .layers()
        .iter()
        .filter(|layer| seen.insert(layer.digest().to_string()))
        .map(Layer::uncompressed_size)
        .sum()
}

/// Stored size of a whole stack, with and without cross-image layer sharing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackSize {
    /// Unique layer digests across all images counted once.
    pub dedup: u64,
    /// Sum of the individual image sizes.
    pub sum: u64,
}

pub fn stack_size(images: &[Image]) -> StackSize {
    let sum = images.iter().map(image_size).sum();
    let mut seen = BTreeSet::new();
    let mut dedup = 0;
    for image in images {
        for layer in image.layers() {
            if seen.insert(layer.digest().to_string()) {
                dedup += layer.uncompressed_size();
            }
        }
    }
    StackSize { dedup, sum }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_nothing(_: &str) -> Option<Image> {
        None
    }

    #[test]
    fn parse_single_stage() {
        let recipe = parse_recipe("FROM scratch\nADD /a 10 c1\n").unwrap();
        assert_eq!(recipe.stages.len(), 1);
        assert_eq!(recipe.stages[0].base_ref, SCRATCH);
        assert_eq!(
            recipe.stages[0].instructions,
            vec![Instruction::AddFile(
                FileEntry::new("/a", 10, "c1").unwrap()
            )]
        );
    }

    #[test]
    fn parse_two_stage_with_copy() {
        let text =
            "FROM base:1 AS build\nADD /out/app 40 app1\nFROM rt:1\nCOPY --from=build /out/app\n";
        let recipe = parse_recipe(text).unwrap();
        assert_eq!(recipe.stages.len(), 2);
        assert_eq!(
            recipe.stages[1].instructions,
            vec![Instruction::CopyFrom {
                stage: "build".to_string(),
                paths: vec!["/out/app".to_string()],
            }]
        );
    }

    #[test]
    fn parse_copy_before_named_stage_is_unknown() {
        let text = "FROM rt:1\nCOPY --from=build /out/app\nFROM base:1 AS build\n";
        let err = parse_recipe(text).unwrap_err();
        assert!(matches!(err, ParseError::UnknownStage { name, .. } if name == "build"));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_recipe("ADD /a 1 c\n").unwrap_err(),
            ParseError::Syntax { line: 1, .. }
        ));
        assert!(matches!(
            parse_recipe("FROM scratch\nBOGUS x\n").unwrap_err(),
            ParseError::Syntax { line: 2, .. }
        ));
        assert!(matches!(
            parse_recipe("FROM a:1 AS s\nFROM b:1 AS s\n").unwrap_err(),
            ParseError::DuplicateStage { line: 2, .. }
        ));
        assert!(parse_recipe("FROM scratch\nADD /a x c\n").is_err());
        assert!(parse_recipe("FROM scratch\nRUN g { }\n").is_err());
        assert!(parse_recipe("").is_err());
    }

    #[test]
    fn parse_run_group() {
        let recipe =
            parse_recipe("FROM scratch\nRUN setup { ADD /a 1 c1; DEL /b; ADD /c 2 c2 }\n").unwrap();
        let Instruction::Group { label, ops } = &recipe.stages[0].instructions[0] else {
            panic!("expected group");
        };
        assert_eq!(label, "setup");
        assert_eq!(ops.len(), 3);
    }

    #[test]
    fn build_single_stage_counts_layers() {
        let recipe = parse_recipe("FROM scratch\nADD /a 1 c1\nADD /b 2 c2\nADD /c 3 c3\n").unwrap();
        let out = build(&recipe, resolve_nothing, "app", "1").unwrap();
        assert_eq!(out.image.layers().len(), 3);
        assert_eq!(materialize(out.image.layers()).len(), 3);
        assert!(out.stage_images.is_empty());
    }

    #[test]
    fn build_multi_stage_drops_build_deps() {
        let text = "\
FROM scratch AS build
ADD /build-dep 500 dep1
ADD /out/app 40 app1
FROM scratch
COPY --from=build /out/app
";
        let out = build(&parse_recipe(text).unwrap(), resolve_nothing, "app", "1").unwrap();
        assert_eq!(out.image.layers().len(), 1);
        let view = materialize(out.image.layers());
        assert_eq!(view.len(), 1);
        let entry = view.get("/out/app").unwrap();
        assert_eq!((entry.size, entry.content_id.as_str()), (40, "app1"));
        assert!(!view.contains("/build-dep"));
        assert_eq!(out.stage_images.len(), 1);
        assert_eq!(out.stage_images[0].name(), "build");
    }

    #[test]
    fn build_copy_of_missing_path_fails() {
        let text = "FROM scratch AS build\nADD /a 1 c1\nFROM scratch\nCOPY --from=build /missing\n";
        let err = build(&parse_recipe(text).unwrap(), resolve_nothing, "app", "1").unwrap_err();
        assert!(matches!(err, BuildError::MissingCopySource { path, .. } if path == "/missing"));
    }

    #[test]
    fn build_unresolved_base_fails() {
        let recipe = parse_recipe("FROM missing:1\nADD /a 1 c1\n").unwrap();
        let err = build(&recipe, resolve_nothing, "app", "1").unwrap_err();
        assert!(
            matches!(err, BuildError::UnresolvedBase { reference } if reference == "missing:1")
        );
    }

    #[test]
    fn build_resolves_base_layers() {
        let base = build(
            &parse_recipe("FROM scratch\nADD /os 100 os1\n").unwrap(),
            resolve_nothing,
            "base",
            "1",
        )
        .unwrap()
        .image;
        let recipe = parse_recipe("FROM base:1\nADD /app 10 app1\n").unwrap();
        let resolve = |r: &str| (r == "base:1").then(|| base.clone());
        let out = build(&recipe, resolve, "app", "1").unwrap();
        assert_eq!(out.image.layers().len(), 2);
        assert_eq!(out.image.layers()[0].digest(), base.layers()[0].digest());
    }

    #[test]
    fn build_is_deterministic() {
        let text = "FROM scratch\nRUN s { ADD /a 1 c1; DEL /b }\nADD /c 2 c2\n";
        let a = build(&parse_recipe(text).unwrap(), resolve_nothing, "x", "1").unwrap();
        let b = build(&parse_recipe(text).unwrap(), resolve_nothing, "x", "1").unwrap();
        let digests = |img: &Image| {
            img.layers()
                .iter()
                .map(|l| l.digest().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(digests(&a.image), digests(&b.image));
    }

    #[test]
    fn squash_monolithic_image_is_unchanged() {
        let image = build(
            &parse_recipe("FROM scratch\nADD /a 10 A\n").unwrap(),
            resolve_nothing,
            "app",
            "1",
        )
        .unwrap()
        .image;
        let squashed = squash(&image);
        assert_eq!(squashed.layers().len(), 1);
        assert_eq!(image_size(&squashed), 10);
        assert_eq!(squashed.tag(), "1-squashed");
        assert_eq!(materialize(squashed.layers()), materialize(image.layers()));
    }

    #[test]
    fn squash_reclaims_overwritten_content() {
        let image = build(
            &parse_recipe("FROM scratch\nADD /a 10 A\nADD /a 8 B\n").unwrap(),
            resolve_nothing,
            "app",
            "1",
        )
        .unwrap()
        .image;
        assert_eq!(image_size(&image), 18);
        let squashed = squash(&image);
        assert_eq!(squashed.layers().len(), 1);
        assert_eq!(image_size(&squashed), 8);
        assert_eq!(materialize(squashed.layers()), materialize(image.layers()));
    }

    #[test]
    fn image_size_counts_duplicate_digests_once() {
        assert_eq!(image_size(&Image::scratch()), 0);
        let layer_a =
            Layer::new(vec![LayerOp::Add(FileEntry::new("/a", 10, "A").unwrap())]).unwrap();
        let layer_b =
            Layer::new(vec![LayerOp::Add(FileEntry::new("/b", 8, "B").unwrap())]).unwrap();
        let image = Image::new("x", "1", vec![layer_a.clone(), layer_b]).unwrap();
        assert_eq!(image_size(&image), 18);
        let doubled = Image::new("x", "1", vec![layer_a.clone(), layer_a]).unwrap();
        assert_eq!(image_size(&doubled), 10);
    }

    #[test]
    fn stack_size_dedups_shared_layers() {
        let base = Layer::new(vec![LayerOp::Add(
            FileEntry::new("/os", 100, "os").unwrap(),
        )])
        .unwrap();
        let app1 = Layer::new(vec![LayerOp::Add(FileEntry::new("/a", 20, "a").unwrap())]).unwrap();
        let app2 = Layer::new(vec![LayerOp::Add(FileEntry::new("/b", 20, "b").unwrap())]).unwrap();
        let one = Image::new("one", "1", vec![base.clone(), app1]).unwrap();
        let two = Image::new("two", "1", vec![base, app2]).unwrap();
        let sizes = stack_size(&[one.clone(), two.clone()]);
        assert_eq!((sizes.dedup, sizes.sum), (140, 240));

        let disjoint = stack_size(std::slice::from_ref(&one));
        assert_eq!(disjoint.dedup, disjoint.sum);

        let twice = stack_size(&[two.clone(), two.clone()]);
        assert_eq!(twice.dedup, image_size(&two));
        assert_eq!(twice.sum, 2 * image_size(&two));
    }

    #[test]
    fn image_validation() {
        assert!(Image::new("ok-name.x_1", "0.1.0", vec![Layer::empty()]).is_ok());
        assert!(Image::new("Bad", "1", vec![Layer::empty()]).is_err());
        assert!(Image::new("..", "1", vec![Layer::empty()]).is_err());
        assert!(Image::new("x", "..", vec![Layer::empty()]).is_err());
        assert!(Image::new("x", "1", vec![]).is_err());
        assert!(parse_reference("a:1").is_ok());
        assert!(parse_reference("a").is_err());
        assert!(parse_reference("a:b:c").is_err());
    }
}
