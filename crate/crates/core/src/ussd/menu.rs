//! Menu tree, screen rendering within the USSD budget, and the per-session
//! dialogue state machine.
//!
//! A screen is an optional one-line notice, a title, up to eight item
//! lines and a footer (`0 Back`, plus `9 Next` when more pages follow).
//! Pages are packed greedily: a page takes as many items as fit.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HistoryEntry, Millis, PatientId, PatientRecord, Prescription, RxId, RxStatus};
use crate::service::Inbox;
use crate::ussd::pdu::MAX_PAYLOAD_CHARS;

/// Characters left for title, items and footer once a notice is reserved.
pub const PAGE_BUDGET: usize = 158;
pub const MAX_NOTICE_CHARS: usize = MAX_PAYLOAD_CHARS - PAGE_BUDGET - 1;
pub const MAX_TITLE_CHARS: usize = 40;
pub const MAX_LINE_CHARS: usize = 48;
pub const MAX_PROMPT_CHARS: usize = 120;
pub const ITEMS_PER_PAGE: usize = 8;

pub const FOOTER_LAST: &str = "0 Back";
pub const FOOTER_MORE: &str = "0 Back\n9 Next";

pub const INVALID_CHOICE: &str = "Invalid choice.";
pub const INPUT_TOO_LONG: &str = "Input too long.";
pub const PATIENT_NOT_FOUND: &str = "Patient not found.";
pub const NO_REFILLS: &str = "No refills available.";
pub const REFILL_FAILED: &str = "Refill not possible.";
pub const BAD_OBSERVATION: &str = "Invalid observation.";
pub const NOT_SAVED: &str = "Could not save.";
pub const NOT_PERMITTED: &str = "Not permitted.";

pub const GOODBYE: &str = "Goodbye.";
pub const REFILL_REQUESTED: &str = "Refill requested.";
pub const OBSERVATION_RECORDED: &str = "Observation recorded.";
pub const NOTE_RECORDED: &str = "Note recorded.";
pub const UNAVAILABLE: &str = "Service unavailable. Try later.";

const DEFAULT_MENU: &str = include_str!("default_menu.json");

// ---- configuration document ------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuDoc {
    pub root: String,
    pub nodes: Vec<MenuNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuNode {
    pub id: String,
    /// `{patient}` is replaced by the selected patient's name.
    pub title: String,
    pub items: Vec<MenuItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuItem {
    pub label: String,
    pub action: ItemAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ItemAction {
    Navigate {
        target: String,
    },
    Prompt {
        field: FieldSpec,
        command: CommandName,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next: Option<String>,
    },
    Command {
        command: CommandName,
    },
    End {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: FieldName,
    pub prompt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    PatientId,
    Observation,
    Note,
}

/// Record-store operations a menu item may bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    SelectPatient,
    PatientHistory,
    ListPrescriptions,
    RequestRefill,
    RecordObservation,
    RecordEncounterNote,
    FacilityInbox,
}

impl CommandName {
    pub const ALL: [CommandName; 7] = [
        CommandName::SelectPatient,
        CommandName::PatientHistory,
        CommandName::ListPrescriptions,
        CommandName::RequestRefill,
        CommandName::RecordObservation,
        CommandName::RecordEncounterNote,
        CommandName::FacilityInbox,
    ];

    pub fn is_write(self) -> bool {
        matches!(
            self,
            CommandName::RequestRefill
                | CommandName::RecordObservation
                | CommandName::RecordEncounterNote
        )
    }

    /// The prompt field this command consumes, if any.
    pub fn field(self) -> Option<FieldName> {
        match self {
            CommandName::SelectPatient => Some(FieldName::PatientId),
            CommandName::RecordObservation => Some(FieldName::Observation),
            CommandName::RecordEncounterNote => Some(FieldName::Note),
            _ => None,
        }
    }

    pub fn needs_patient(self) -> bool {
        !matches!(self, CommandName::SelectPatient | CommandName::FacilityInbox)
    }

    /// Name of the record-store operation this binds to.
    pub fn operation(self) -> &'static str {
        match self {
            CommandName::SelectPatient => "get_patient",
            CommandName::PatientHistory => "patient_history",
            CommandName::ListPrescriptions => "list_prescriptions",
            CommandName::RequestRefill => "request_refill",
            CommandName::RecordObservation => "record_observation",
            CommandName::RecordEncounterNote => "record_encounter",
            CommandName::FacilityInbox => "facility_inbox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MenuError {
    #[error("menu document is not valid JSON: {0}")]
    Parse(String),
    #[error("invalid menu: {0}")]
    Invalid(String),
    #[error("PAGE_OUT_OF_RANGE: page {page} of {pages}")]
    PageOutOfRange { page: usize, pages: usize },
    #[error("unknown node {0}")]
    UnknownNode(String),
}

/// A validated menu tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Menu {
    doc: MenuDoc,
    index: BTreeMap<String, usize>,
}

impl Menu {
    pub fn from_json(text: &str) -> Result<Self, MenuError> {
        let doc: MenuDoc = serde_json::from_str(text).map_err(|e| MenuError::Parse(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn default_tree() -> Self {
        Self::from_json(DEFAULT_MENU).expect("shipped menu is valid")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_MENU
    }

    pub fn from_doc(doc: MenuDoc) -> Result<Self, MenuError> {
        let bad = |m: String| Err(MenuError::Invalid(m));
        let mut index = BTreeMap::new();
        for (i, n) in doc.nodes.iter().enumerate() {
            if n.id.trim().is_empty() {
                return bad("node with empty id".into());
            }
            if index.insert(n.id.clone(), i).is_some() {
                return bad(format!("duplicate node id {}", n.id));
            }
        }
        if !index.contains_key(&doc.root) {
            return bad(format!("root {} is not a node", doc.root));
        }
        for n in &doc.nodes {
            if n.items.is_empty() {
                return bad(format!("node {} has no items", n.id));
            }
            if n.title.trim().is_empty() {
                return bad(format!("node {} has an empty title", n.id));
            }
            for item in &n.items {
                let label_len = item.label.chars().count();
                if label_len == 0 || label_len > MAX_LINE_CHARS - 2 {
                    return bad(format!(
                        "label {:?} in {} must be 1..={} characters",
                        item.label,
                        n.id,
                        MAX_LINE_CHARS - 2
                    ));
                }
                match &item.action {
                    ItemAction::Navigate { target } => {
                        if !index.contains_key(target) {
                            return bad(format!("{} navigates to unknown node {target}", n.id));
                        }
                    }
                    ItemAction::Prompt {
                        field,
                        command,
                        next,
                    } => {
                        if command.field() != Some(field.name) {
                            return bad(format!(
                                "command {command:?} cannot take field {:?}",
                                field.name
                            ));
                        }
                        let plen = field.prompt.chars().count();
                        if plen == 0 || plen > MAX_PROMPT_CHARS {
                            return bad(format!("prompt in {} must be 1..={MAX_PROMPT_CHARS} characters", n.id));
                        }
                        match (command, next) {
                            (CommandName::SelectPatient, Some(t)) if index.contains_key(t) => {}
                            (CommandName::SelectPatient, _) => {
                                return bad(format!("select_patient in {} needs a known next node", n.id))
                            }
                            (_, Some(_)) => {
                                return bad(format!("only select_patient may name a next node ({})", n.id))
                            }
                            (_, None) => {}
                        }
                    }
                    ItemAction::Command { command } => {
                        if command.field().is_some() {
                            return bad(format!("command {command:?} in {} needs a prompt", n.id));
                        }
                    }
                    ItemAction::End { message } => {
                        let len = message.chars().count();
                        if len == 0 || len > MAX_PAYLOAD_CHARS {
                            return bad(format!("end message in {} must be 1..={MAX_PAYLOAD_CHARS} characters", n.id));
                        }
                    }
                }
            }
        }
        let menu = Menu { doc, index };
        menu.check_reachability()?;
        Ok(menu)
    }

    /// Every node must be reachable from the root, and commands needing a
    /// selected patient may only appear where one is always selected.
    fn check_reachability(&self) -> Result<(), MenuError> {
        // (node, has_patient) states
        let mut seen: BTreeSet<(String, bool)> = BTreeSet::new();
        let mut queue = VecDeque::from([(self.doc.root.clone(), false)]);
        while let Some((id, patient)) = queue.pop_front() {
            if !seen.insert((id.clone(), patient)) {
                continue;
            }
            let node = self.node(&id).expect("validated");
            for item in &node.items {
                let command = match &item.action {
                    ItemAction::Navigate { target } => {
                        queue.push_back((target.clone(), patient));
                        None
                    }
                    ItemAction::Prompt { command, next, .. } => {
                        if let Some(t) = next {
                            queue.push_back((t.clone(), true));
                        }
                        Some(*command)
                    }
                    ItemAction::Command { command } => Some(*command),
                    ItemAction::End { .. } => None,
                };
                if let Some(c) = command {
                    if c.needs_patient() && !patient {
                        return Err(MenuError::Invalid(format!(
                            "{c:?} in node {id} is reachable without a selected patient"
                        )));
                    }
                }
            }
        }
        let reached: BTreeSet<&str> = seen.iter().map(|(id, _)| id.as_str()).collect();
        if let Some(n) = self.doc.nodes.iter().find(|n| !reached.contains(n.id.as_str())) {
            return Err(MenuError::Invalid(format!("node {} is unreachable from root", n.id)));
        }
        Ok(())
    }

    pub fn root(&self) -> &str {
        &self.doc.root
    }

    pub fn doc(&self) -> &MenuDoc {
        &self.doc
    }

    pub fn node(&self, id: &str) -> Option<&MenuNode> {
        self.index.get(id).map(|i| &self.doc.nodes[*i])
    }

    pub fn nodes(&self) -> &[MenuNode] {
        &self.doc.nodes
    }

    /// Every command bound anywhere in the tree.
    pub fn commands(&self) -> BTreeSet<CommandName> {
        self.doc
            .nodes
            .iter()
            .flat_map(|n| &n.items)
            .filter_map(|i| match &i.action {
                ItemAction::Prompt { command, .. } | ItemAction::Command { command } => Some(*command),
                _ => None,
            })
            .collect()
    }

    fn title_of(&self, node: &MenuNode, patient: Option<&PatientCtx>) -> String {
        let name = patient.map_or("", |p| p.name.as_str());
        node.title.replace("{patient}", name)
    }

    /// Render one page of a node's item list.
    pub fn render_screen(
        &self,
        node_id: &str,
        page: usize,
        patient: Option<&PatientCtx>,
    ) -> Result<String, MenuError> {
        let node = self
            .node(node_id)
            .ok_or_else(|| MenuError::UnknownNode(node_id.to_owned()))?;
        let labels: Vec<String> = node.items.iter().map(|i| i.label.clone()).collect();
        render_page(&self.title_of(node, patient), &labels, true, page)
    }
}

// ---- pagination ------------------------------------------------------------

fn clip(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

fn chars(s: &str) -> usize {
    s.chars().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageSpan {
    pub start: usize,
    pub len: usize,
    pub more: bool,
}

/// Greedy page packing given the title length and each line's length
/// (numbering prefix included). The last page uses the short footer.
pub fn paginate(title_chars: usize, line_chars: &[usize]) -> Vec<PageSpan> {
    let fixed = title_chars + 1;
    let mut pages = Vec::new();
    let mut start = 0;
    loop {
        let rest = &line_chars[start..];
        let cost = |n: usize| fixed + rest[..n].iter().map(|l| l + 1).sum::<usize>();
        if rest.len() <= ITEMS_PER_PAGE && cost(rest.len()) + FOOTER_LAST.len() <= PAGE_BUDGET {
            pages.push(PageSpan {
                start,
                len: rest.len(),
                more: false,
            });
            return pages;
        }
        let mut n = 1;
        while n < rest.len().min(ITEMS_PER_PAGE) && cost(n + 1) + FOOTER_MORE.len() <= PAGE_BUDGET {
            n += 1;
        }
        pages.push(PageSpan {
            start,
            len: n,
            more: true,
        });
        start += n;
    }
}

fn layout(title: &str, lines: &[String], numbered: bool) -> (String, Vec<String>, Vec<PageSpan>) {
    let title = clip(title, MAX_TITLE_CHARS);
    let width = if numbered { MAX_LINE_CHARS - 2 } else { MAX_LINE_CHARS };
    let lines: Vec<String> = lines.iter().map(|l| clip(l, width)).collect();
    let extra = if numbered { 2 } else { 0 };
    let lens: Vec<usize> = lines.iter().map(|l| chars(l) + extra).collect();
    let pages = paginate(chars(&title), &lens);
    (title, lines, pages)
}

pub fn page_count(title: &str, lines: &[String], numbered: bool) -> usize {
    layout(title, lines, numbered).2.len()
}

/// Render page `page` of a list. Numbered lists prefix items with their
/// key (1-8, restarting on every page).
pub fn render_page(title: &str, lines: &[String], numbered: bool, page: usize) -> Result<String, MenuError> {
    let (title, lines, pages) = layout(title, lines, numbered);
    let span = pages.get(page).ok_or(MenuError::PageOutOfRange {
        page,
        pages: pages.len(),
    })?;
    let mut out = title;
    out.push('\n');
    for (k, line) in lines[span.start..span.start + span.len].iter().enumerate() {
        if numbered {
            out.push_str(&format!("{} ", k + 1));
        }
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(if span.more { FOOTER_MORE } else { FOOTER_LAST });
    Ok(out)
}

fn with_notice(notice: Option<&str>, body: String) -> String {
    match notice {
        Some(n) => format!("{n}\n{body}"),
        None => body,
    }
}

// ---- dialogue state ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct PatientCtx {
    pub patient_id: PatientId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "frame", rename_all = "snake_case")]
pub enum Frame {
    Node {
        node: String,
        page: usize,
        patient: Option<PatientCtx>,
    },
    Prompt {
        field: FieldSpec,
        command: CommandName,
        next: Option<String>,
        patient: Option<PatientCtx>,
    },
    /// Result list. When `pick` is set, item keys choose a prescription to
    /// request a refill for.
    Listing {
        title: String,
        lines: Vec<String>,
        page: usize,
        pick: Option<Vec<RxId>>,
        patient: Option<PatientCtx>,
    },
}

impl Frame {
    fn patient(&self) -> Option<&PatientCtx> {
        match self {
            Frame::Node { patient, .. } | Frame::Prompt { patient, .. } | Frame::Listing { patient, .. } => {
                patient.as_ref()
            }
        }
    }
}

/// A concrete request to the record store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum EhrCommand {
    SelectPatient { patient_id: PatientId },
    PatientHistory { patient_id: PatientId },
    ListPrescriptions { patient_id: PatientId },
    /// First half of the refill flow: fetch the patient's prescriptions.
    RefillCandidates { patient_id: PatientId },
    RequestRefill { rx_id: RxId },
    RecordObservation { patient_id: PatientId, text: String },
    RecordNote { patient_id: PatientId, text: String },
    FacilityInbox,
}

impl EhrCommand {
    pub fn is_write(&self) -> bool {
        matches!(
            self,
            EhrCommand::RequestRefill { .. }
                | EhrCommand::RecordObservation { .. }
                | EhrCommand::RecordNote { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandResult {
    Patient(PatientRecord),
    History(Vec<HistoryEntry>),
    Prescriptions(Vec<Prescription>),
    Inbox(Inbox),
    Done,
    NotFound,
    Denied,
    Failed(String),
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Keep the dialogue open with this screen.
    Screen(String),
    /// Close the dialogue with this message.
    End(String),
    /// Run this command and pass the result to [`MenuSession::complete`].
    Execute(EhrCommand),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MenuSession {
    stack: Vec<Frame>,
    pending: Option<EhrCommand>,
}

fn fmt_date(ms: Millis) -> String {
    i64::try_from(ms)
        .ok()
        .and_then(DateTime::from_timestamp_millis)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "?".into())
}

fn encounter_summary(codes: &[String], note: &str) -> String {
    if codes.is_empty() {
        note.to_owned()
    } else {
        codes.join(",")
    }
}

pub fn history_lines(entries: &[HistoryEntry]) -> Vec<String> {
    if entries.is_empty() {
        return vec!["No records.".into()];
    }
    entries
        .iter()
        .map(|h| match h {
            HistoryEntry::Encounter(e) => format!(
                "{} {}",
                fmt_date(e.occurred_at),
                encounter_summary(&e.diagnosis_codes, &e.note)
            ),
            HistoryEntry::Prescription(rx) => {
                format!("{} Rx {} {}", fmt_date(rx.prescribed_at), rx.drug_code, rx.dose)
            }
        })
        .collect()
}

fn status_word(s: RxStatus) -> &'static str {
    match s {
        RxStatus::Active => "active",
        RxStatus::RefillRequested => "refill requested",
        RxStatus::Expired => "expired",
    }
}

pub fn prescription_lines(rxs: &[Prescription]) -> Vec<String> {
    if rxs.is_empty() {
        return vec!["No prescriptions.".into()];
    }
    rxs.iter()
        .map(|rx| {
            format!(
                "{} {} {}, {} left",
                rx.drug_code,
                rx.dose,
                status_word(rx.status),
                rx.refills_remaining
            )
        })
        .collect()
}

pub fn inbox_lines(inbox: &Inbox) -> Vec<String> {
    let mut lines: Vec<String> = inbox
        .pending_refills
        .iter()
        .map(|rx| format!("Refill {} for {}", rx.drug_code, rx.patient_id))
        .collect();
    lines.extend(inbox.encounters.iter().map(|e| {
        format!(
            "{} {} {}",
            fmt_date(e.occurred_at),
            e.patient_id,
            encounter_summary(&e.diagnosis_codes, &e.note)
        )
    }));
    if lines.is_empty() {
        lines.push("Inbox empty.".into());
    }
    lines
}

fn refillable(rx: &Prescription) -> bool {
    rx.status == RxStatus::Active && rx.refills_remaining > 0
}

impl MenuSession {
    pub fn new(menu: &Menu) -> Self {
        Self {
            stack: vec![Frame::Node {
                node: menu.root().to_owned(),
                page: 0,
                patient: None,
            }],
            pending: None,
        }
    }

    pub fn stack(&self) -> &[Frame] {
        &self.stack
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn is_prompting(&self) -> bool {
        matches!(self.stack.last(), Some(Frame::Prompt { .. }))
    }

    pub fn pending(&self) -> Option<&EhrCommand> {
        self.pending.as_ref()
    }

    fn top(&self) -> &Frame {
        self.stack.last().expect("stack never empty")
    }

    fn top_mut(&mut self) -> &mut Frame {
        self.stack.last_mut().expect("stack never empty")
    }

    /// The current screen, optionally preceded by a notice line.
    pub fn render(&self, menu: &Menu, notice: Option<&str>) -> String {
        let body = match self.top() {
            Frame::Node { node, page, patient } => menu
                .render_screen(node, *page, patient.as_ref())
                .expect("page kept in range"),
            Frame::Prompt { field, .. } => field.prompt.clone(),
            Frame::Listing {
                title,
                lines,
                page,
                pick,
                ..
            } => render_page(title, lines, pick.is_some(), *page).expect("page kept in range"),
        };
        with_notice(notice, body)
    }

    fn screen(&self, menu: &Menu, notice: Option<&str>) -> Step {
        Step::Screen(self.render(menu, notice))
    }

    fn invalid(&self, menu: &Menu) -> Step {
        self.screen(menu, Some(INVALID_CHOICE))
    }

    /// Current page's span and page count for the top frame.
    fn top_pages(&self, menu: &Menu) -> Option<(usize, Vec<PageSpan>)> {
        match self.top() {
            Frame::Node { node, page, patient } => {
                let n = menu.node(node)?;
                let labels: Vec<String> = n.items.iter().map(|i| i.label.clone()).collect();
                let title = menu.title_of(n, patient.as_ref());
                Some((*page, layout(&title, &labels, true).2))
            }
            Frame::Listing {
                title,
                lines,
                page,
                pick,
                ..
            } => Some((*page, layout(title, lines, pick.is_some()).2)),
            Frame::Prompt { .. } => None,
        }
    }

    fn set_page(&mut self, to: usize) {
        match self.top_mut() {
            Frame::Node { page, .. } | Frame::Listing { page, .. } => *page = to,
            Frame::Prompt { .. } => {}
        }
    }

    fn begin(&mut self, command: EhrCommand) -> Step {
        self.pending = Some(command.clone());
        Step::Execute(command)
    }

    /// Interpret one line of user input.
    pub fn step(&mut self, menu: &Menu, input: &str) -> Step {
        if self.pending.is_some() {
            // The previous command never completed; treat as unavailable.
            self.pending = None;
            return Step::End(UNAVAILABLE.into());
        }
        let input = input.trim();
        if let Frame::Prompt {
            field,
            command,
            patient,
            ..
        } = self.top().clone()
        {
            if input == "0" {
                self.stack.pop();
                return self.screen(menu, None);
            }
            if input.is_empty() {
                return self.invalid(menu);
            }
            let pid = patient.map(|p| p.patient_id);
            let cmd = match (field.name, pid) {
                (FieldName::PatientId, _) => EhrCommand::SelectPatient {
                    patient_id: PatientId::new(input),
                },
                (FieldName::Observation, Some(patient_id)) => EhrCommand::RecordObservation {
                    patient_id,
                    text: input.to_owned(),
                },
                (FieldName::Note, Some(patient_id)) => EhrCommand::RecordNote {
                    patient_id,
                    text: input.to_owned(),
                },
                _ => {
                    debug_assert!(false, "{command:?} without patient context");
                    return self.invalid(menu);
                }
            };
            return self.begin(cmd);
        }

        let Some((page, pages)) = self.top_pages(menu) else {
            return self.invalid(menu);
        };
        let span = pages[page];
        match input {
            "0" => {
                if page > 0 {
                    self.set_page(page - 1);
                } else if self.stack.len() == 1 {
                    return Step::End(GOODBYE.into());
                } else {
                    self.stack.pop();
                }
                self.screen(menu, None)
            }
            "9" if span.more => {
                self.set_page(page + 1);
                self.screen(menu, None)
            }
            k if k.len() == 1 && matches!(k.as_bytes()[0], b'1'..=b'8') => {
                let slot = usize::from(k.as_bytes()[0] - b'1');
                if slot >= span.len {
                    return self.invalid(menu);
                }
                self.select(menu, span.start + slot)
            }
            _ => self.invalid(menu),
        }
    }

    fn select(&mut self, menu: &Menu, index: usize) -> Step {
        let patient = self.top().patient().cloned();
        match self.top().clone() {
            Frame::Listing { pick: Some(rxs), .. } => self.begin(EhrCommand::RequestRefill {
                rx_id: rxs[index].clone(),
            }),
            Frame::Listing { pick: None, .. } => self.invalid(menu),
            Frame::Node { node, .. } => {
                let item = &menu.node(&node).expect("validated").items[index];
                match &item.action {
                    ItemAction::Navigate { target } => {
                        self.stack.push(Frame::Node {
                            node: target.clone(),
                            page: 0,
                            patient,
                        });
                        self.screen(menu, None)
                    }
                    ItemAction::Prompt {
                        field,
                        command,
                        next,
                    } => {
                        self.stack.push(Frame::Prompt {
                            field: field.clone(),
                            command: *command,
                            next: next.clone(),
                            patient,
                        });
                        self.screen(menu, None)
                    }
                    ItemAction::Command { command } => {
                        let pid = patient.map(|p| p.patient_id);
                        let cmd = match (command, pid) {
                            (CommandName::FacilityInbox, _) => EhrCommand::FacilityInbox,
                            (CommandName::PatientHistory, Some(patient_id)) => {
                                EhrCommand::PatientHistory { patient_id }
                            }
                            (CommandName::ListPrescriptions, Some(patient_id)) => {
                                EhrCommand::ListPrescriptions { patient_id }
                            }
                            (CommandName::RequestRefill, Some(patient_id)) => {
                                EhrCommand::RefillCandidates { patient_id }
                            }
                            _ => return self.invalid(menu),
                        };
                        self.begin(cmd)
                    }
                    ItemAction::End { message } => Step::End(message.clone()),
                }
            }
            Frame::Prompt { .. } => unreachable!("prompts handled in step"),
        }
    }

    fn push_listing(&mut self, title: &str, lines: Vec<String>, pick: Option<Vec<RxId>>) {
        let patient = self.top().patient().cloned();
        self.stack.push(Frame::Listing {
            title: title.into(),
            lines,
            page: 0,
            pick,
            patient,
        });
    }

    /// Feed the result of the command returned by the last [`Step::Execute`].
    pub fn complete(&mut self, menu: &Menu, result: CommandResult) -> Step {
        let Some(command) = self.pending.take() else {
            return Step::End(UNAVAILABLE.into());
        };
        match (command, result) {
            (_, CommandResult::Unavailable) => Step::End(UNAVAILABLE.into()),
            (_, CommandResult::Denied) => self.screen(menu, Some(NOT_PERMITTED)),
            (EhrCommand::SelectPatient { .. }, CommandResult::Patient(rec)) => {
                let Some(Frame::Prompt { next: Some(next), .. }) = self.stack.pop() else {
                    return Step::End(UNAVAILABLE.into());
                };
                self.stack.push(Frame::Node {
                    node: next,
                    page: 0,
                    patient: Some(PatientCtx {
                        patient_id: rec.patient_id,
                        name: rec.name,
                    }),
                });
                self.screen(menu, None)
            }
            (_, CommandResult::NotFound) => self.screen(menu, Some(PATIENT_NOT_FOUND)),
            (EhrCommand::PatientHistory { .. }, CommandResult::History(h)) => {
                self.push_listing("History", history_lines(&h), None);
                self.screen(menu, None)
            }
            (EhrCommand::ListPrescriptions { .. }, CommandResult::Prescriptions(rxs)) => {
                self.push_listing("Prescriptions", prescription_lines(&rxs), None);
                self.screen(menu, None)
            }
            (EhrCommand::RefillCandidates { .. }, CommandResult::Prescriptions(rxs)) => {
                let candidates: Vec<&Prescription> = rxs.iter().filter(|r| refillable(r)).collect();
                match candidates.as_slice() {
                    [] => self.screen(menu, Some(NO_REFILLS)),
                    [one] => self.begin(EhrCommand::RequestRefill {
                        rx_id: one.rx_id.clone(),
                    }),
                    many => {
                        let lines = many
                            .iter()
                            .map(|r| format!("{} {} ({} left)", r.drug_code, r.dose, r.refills_remaining))
                            .collect();
                        let ids = many.iter().map(|r| r.rx_id.clone()).collect();
                        self.push_listing("Refill which?", lines, Some(ids));
                        self.screen(menu, None)
                    }
                }
            }
            (EhrCommand::RequestRefill { .. }, CommandResult::Done) => Step::End(REFILL_REQUESTED.into()),
            (EhrCommand::RequestRefill { .. }, CommandResult::Failed(_)) => {
                self.screen(menu, Some(REFILL_FAILED))
            }
            (EhrCommand::RecordObservation { .. }, CommandResult::Done) => {
                Step::End(OBSERVATION_RECORDED.into())
            }
            (EhrCommand::RecordObservation { .. }, CommandResult::Failed(_)) => {
                self.screen(menu, Some(BAD_OBSERVATION))
            }
            (EhrCommand::RecordNote { .. }, CommandResult::Done) => Step::End(NOTE_RECORDED.into()),
            (EhrCommand::RecordNote { .. }, CommandResult::Failed(_)) => self.screen(menu, Some(NOT_SAVED)),
            (EhrCommand::FacilityInbox, CommandResult::Inbox(inbox)) => {
                self.push_listing("Inbox", inbox_lines(&inbox), None);
                self.screen(menu, None)
            }
            (_, CommandResult::Failed(_)) => self.screen(menu, Some(NOT_SAVED)),
            (cmd, other) => {
                tracing::warn!(?cmd, ?other, "command result does not match command");
                Step::End(UNAVAILABLE.into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn menu() -> Menu {
        Menu::default_tree()
    }

    /// Independent greedy packer: fill a page line by line while the page
    /// (with the "more" footer) still fits, unless everything left fits
    /// with the short footer.
    fn oracle_pages(title: &str, lines: &[String]) -> usize {
        let t = title.chars().count().min(40) + 1;
        let ls: Vec<usize> = lines.iter().map(|l| l.chars().count().min(48) + 1).collect();
        let mut i = 0;
        let mut pages = 0;
        loop {
            pages += 1;
            let left: usize = ls[i..].iter().sum();
            if ls.len() - i <= 8 && t + left + "0 Back".len() <= 158 {
                return pages;
            }
            let mut used = t + ls[i];
            let mut n = 1;
            i += 1;
            while n < 8 && i < ls.len() && used + ls[i] + "0 Back\n9 Next".len() <= 158 {
                used += ls[i];
                i += 1;
                n += 1;
            }
        }
    }

    #[test]
    fn notices_fit_reserved_space() {
        for n in [
            INVALID_CHOICE,
            INPUT_TOO_LONG,
            PATIENT_NOT_FOUND,
            NO_REFILLS,
            REFILL_FAILED,
            BAD_OBSERVATION,
            NOT_SAVED,
            NOT_PERMITTED,
        ] {
            assert!(n.chars().count() <= MAX_NOTICE_CHARS, "{n}");
        }
    }

    #[test]
    fn three_items_one_page() {
        let text = menu().render_screen("root", 0, None).unwrap();
        assert_eq!(
            text,
            "Offgrid EHR\n1 Patient lookup\n2 My facility inbox\n3 Help\n0 Back"
        );
        assert!(matches!(
            menu().render_screen("root", 1, None),
            Err(MenuError::PageOutOfRange { .. })
        ));
    }

    #[test]
    fn long_lists_split_within_budget() {
        let lines: Vec<String> = (0..30).map(|i| format!("{i:02} {}", "x".repeat(40))).collect();
        let pages = page_count("History", &lines, false);
        assert!(pages > 1);
        for p in 0..pages {
            let text = render_page("History", &lines, false, p).unwrap();
            assert!(text.chars().count() <= PAGE_BUDGET, "{text}");
            assert_eq!(text.ends_with("9 Next"), p + 1 < pages);
        }
    }

    #[test]
    fn twenty_item_history_matches_oracle() {
        let mut rng = crate::entropy::Entropy::seeded(17);
        for _ in 0..200 {
            let lines: Vec<String> = (0..20)
                .map(|_| "h".repeat(5 + (rng.next_u64() % 50) as usize))
                .collect();
            assert_eq!(page_count("History", &lines, false), oracle_pages("History", &lines));
        }
    }

    #[test]
    fn root_one_prompts_for_patient() {
        let m = menu();
        let mut s = MenuSession::new(&m);
        assert_eq!(s.step(&m, "1"), Step::Screen("Enter patient ID:".into()));
        assert!(s.is_prompting());
        assert_eq!(s.step(&m, "0"), Step::Screen(m.render_screen("root", 0, None).unwrap()));
    }

    #[test]
    fn invalid_input_rerenders() {
        let m = menu();
        let mut s = MenuSession::new(&m);
        let root = m.render_screen("root", 0, None).unwrap();
        for bad in ["7", "9", "x", "", "12"] {
            assert_eq!(s.step(&m, bad), Step::Screen(format!("Invalid choice.\n{root}")));
        }
        assert_eq!(s.step(&m, "0"), Step::End(GOODBYE.into()));
    }

    #[test]
    fn loader_rejects_broken_trees() {
        let base: serde_json::Value = serde_json::from_str(Menu::default_json()).unwrap();
        let mutate = |f: &dyn Fn(&mut serde_json::Value)| {
            let mut v = base.clone();
            f(&mut v);
            Menu::from_json(&v.to_string())
        };
        assert!(mutate(&|_| {}).is_ok());
        assert!(mutate(&|v| v["root"] = "nope".into()).is_err());
        assert!(mutate(&|v| v["nodes"][0]["items"][2]["action"]["target"] = "nope".into()).is_err());
        // help node unreachable
        assert!(mutate(&|v| v["nodes"][0]["items"].as_array_mut().unwrap().truncate(2)).is_err());
        // patient command at root without a selected patient
        assert!(mutate(&|v| v["nodes"][0]["items"][1]["action"]["command"] = "patient_history".into()).is_err());
        assert!(mutate(&|v| v["nodes"][0]["items"][0]["action"]["field"]["name"] = "note".into()).is_err());
        assert!(mutate(&|v| v["nodes"][0]["extra"] = 1.into()).is_err());
    }

    #[test]
    fn write_commands_are_exactly_three() {
        let writes: BTreeSet<_> = menu().commands().into_iter().filter(|c| c.is_write()).collect();
        assert_eq!(
            writes,
            BTreeSet::from([
                CommandName::RequestRefill,
                CommandName::RecordObservation,
                CommandName::RecordEncounterNote
            ])
        );
        assert_eq!(menu().commands().len(), CommandName::ALL.len());
    }
}
