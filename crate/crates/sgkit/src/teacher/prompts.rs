//! Prompt templates for the teacher, judge, and editor roles. These are
//! reproduced exactly; the builders in the parent module fill in per-image
//! content around them.

/// System template for dense object and relationship generation.
pub const RELATION_GENERATION_SYSTEM: &str = r#"You are provided 'Captions', 'Region Captions', 'Scene Graph', and 'QAs' annotated by humans, which are guaranteed to be correct.
- [Captions]: General image overviews.
- [Region Captions]: Detailed descriptions of particular image regions.
- [Objects]: Grounded objects annotated by humans. In format of [object_id (int)]: [bbox] object_name
- [Scene Graph]: In format of [object_id (int)]: ([bbox], optional depth) [list of attributes] object_name [relationship with other objects]
Bounding boxes (bbox) are labeled in the form of bounding box as [x1,y1,x2,y2] normalized from 0 to 1000.
You might also have depth information from 0 to 255, where low depth means it's farther back in the image.

**Objective**: Your task is to meticulously document all discernible relationships between a selected object and other objects within the scene, and provide a dense, detailed description of the object as well. This involves a comprehensive examination of the scene to identify and record every possible, interesting relationship that the chosen object has/ may have with others. These relationships can be of various types, including but not limited to interactional, (e.g., holding, looking at), functional (e.g., part of, used by, owned by, contains), hierarchical, and spatial relationships (e.g., above, behind, attached to, etc.).
Please specify the category of relationship you are looking to annotate and then provide the list.

**Relation Requirement**:
- Try to include at least 10 total relationships per object, describing beyond what is said explicitly in the descriptions if needed, by reasoning about the bounding boxes and depth.
- Prioritize including interactional and action-based relationships first.
- Prioritize human-annotated captions for accuracy and consistency, and carefully consider model-generated descriptions for additional details.
- Categorize your relationships into one of the following categories:
    1. **Spatial Relationships**: These refer to the physical location or position of the person in relation to other objects or individuals. Examples include 'above', 'below', 'over', 'across from', 'behind', 'in front of', 'inside', 'outside' etc.

    2. **Interactional Relationships**: These involve some form of action or interaction between the person and other objects or individuals. Examples include 'holding', 'touching', 'looking at', 'talking to', 'playing with', 'using', etc.

    3. **Functional Relationships**: These refer to the purpose or function of an object in relation to the person. Examples include 'worn by', 'used by', 'owned by', 'part of', etc.

    4. **Social Relationships** (for human): These refer to the social connection or interaction between the person and other individuals. Examples include 'friend of', 'sibling of', 'parent of', 'colleague of', 'boss of', etc.

    5. **Emotional Relationships** (for human): These refer to the emotional connection or feelings between the person and other individuals. Examples include 'loves', 'likes', 'dislikes', 'hates', etc.

**Description Requirement**:
- The description should cover the interesting features and focus on relationships with other objects.
- Your description should be factual and to the point. It SHOULD NOT have suggesting, speculative or interpretative additions about the object's significance or its contribution to the scene's atmosphere and vibe.
- **Physical Attributes**: Briefly detail the object's color, size, texture, attributes, and any other pertinent physical characteristics.
- **Position**: Describe the object's location within the scene with precision.
- **Relationships with Other Objects**: Document all direct spatial and interactional relationships the object has with other objects. This includes being next to, above, below, holding, or any other clear relationship. Each relationship should be stated plainly, specifying the type of relationship and the related object's ID.
- Avoid including obvious traits/properties of the object that can be inferred without looking at the image."#;

/// System template for scene-graph editing.
pub const SCENE_GRAPH_EDIT_SYSTEM: &str = r#"You are given the original image and a set of same images with highlighted regions specified by unique id labels (colors matching the referred region).
You are provided:
    - dense caption of the image that describes the scene as detailed as possible.
    - scene graph **generated** by AI model that might contain hallucinated objects and relationships.

Your goal is to fix and improve this AI generated scene graph.
Each object in the scene graph is labeled with a unique numeric id and provided with bounding box coordinates `[x1, y1, x2, y2]` (top-left and bottom-right).
We want to verify the correctness of the objects and relationships in the scene graph.
The input scene graph has the format:
{
    'obj_id': {
        'name': 'A description of the object',
        'bbox': [x1, y1, x2, y2],
        'rel': {
            'rel_name': [integer list of other obj_ids],
        }
    },
}

Your task:
Generate only the ''Edits'' needed to correct the objects and relationships in the scene graph.
Your response will be called by python dictionary `update` method, so make sure you only generate just the NECESSARY edits.

1. Go through all the objects in the scene graph and determine if you can confidently say the object mentioned by noisy description is really present and visible in the image.
    - If you think you can confidently verify the presence of an object and the description can be improved, provide a revised description with more accurate object name and more visual specificity.
    - If you are unable to confidently verify the presence of an object or suspect it might be inaccurately represented for the given region, please provide a revised description using a more accurate object name if possible, or alternatively, classify it under a broader, safer category. These can be 'decoration', 'tool', 'foliage', 'furniture item', etc., to ensure clarity and avoid misidentification. Then, provide more specificity to your name so that viewer can disambiguate the object from other objects.
    - Try to include the object's position, color, texture, and/or any other distinguishing feature.
    - Remember to use the first original image to accurately identify the color and texture of the objects.
    - Make sure to take the bounding box size and location into account to correctly describe the specified region.

2. Then, make edits to the relationships by adding the prominent relationships current scene graph is missing, or/and removing erroneous relationships between objects in the scene.
    For example, object 1 has relationship: {'on': [2,3,4,5]} and you think it should be {'on': [2,3]}, then you should include object_ids [4,5] in the 'remove' list.
    Also, if object 2 has relationship: {'contains': [2,6,7]} and you think it should be {'contains': [2,6,7,8]}, then you should include object_ids [8] in the 'add' list, and also add the relationship type 'spatial' to the 'add' list.
    If no relationships need to be added and/or removed, please return an empty list for 'add' and/or 'remove'.

Output should be a flattened JSON object with no unnecessary spacing."#;

/// The binary VQA question put to each judge.
pub const JUDGE_QUESTION: &str =
    "Does this relation correctly describe the image? Answer with Yes or No.";
