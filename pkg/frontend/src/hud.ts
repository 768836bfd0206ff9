/** DOM overlay: numeric readout, error toasts, connection banner, and a
 * small settings panel for indicator sizes.
 *
 * The readout keeps the last decoded payloads untouched so the displayed
 * numbers are exactly the served numbers, formatting aside.
 */

import { ErrorPayload, GuidancePayload, TwoRingPayload } from './wire.js';
import { IndicatorSettings, UiMode } from './viewState.js';

const TOAST_MS = 4000;

function el(tag: string, className: string, parent: HTMLElement):
    HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  parent.appendChild(node);
  return node;
}

export class Hud {
  root: HTMLElement;
  readout: HTMLElement;
  toastBox: HTMLElement;
  banner: HTMLElement;
  modeButton: HTMLElement;
  nextButton: HTMLElement;
  settingsPanel: HTMLElement;

  lastGuidanceRaw: GuidancePayload | null = null;
  lastTwoRingRaw: TwoRingPayload | null = null;
  uiMode: UiMode = 'mruct';

  onModeToggle: (() => void) | null = null;
  onNext: (() => void) | null = null;
  onSettingsChanged: (() => void) | null = null;

  private settings: IndicatorSettings;

  constructor(parent: HTMLElement, settings: IndicatorSettings) {
    this.settings = settings;
    this.root = el('div', 'hud', parent);
    this.banner = el('div', 'banner', this.root);
    this.banner.style.display = 'none';
    this.banner.textContent = 'connection lost, reconnecting';
    this.readout = el('div', 'readout', this.root);
    this.toastBox = el('div', 'toasts', this.root);

    const bar = el('div', 'buttons', this.root);
    this.modeButton = el('button', 'mode-toggle', bar);
    this.modeButton.textContent = 'display: mruct';
    this.modeButton.addEventListener('click', () => {
      this.uiMode = this.uiMode === 'mruct' ? 'two_ring' : 'mruct';
      this.modeButton.textContent = `display: ${this.uiMode}`;
      if (this.onModeToggle) this.onModeToggle();
    });
    this.nextButton = el('button', 'next-trajectory', bar);
    this.nextButton.textContent = 'next trajectory';
    this.nextButton.addEventListener('click', () => {
      if (this.onNext) this.onNext();
    });

    this.settingsPanel = el('div', 'settings', this.root);
    this.buildSettings();
  }

  private buildSettings(): void {
    const fields: [keyof IndicatorSettings, string][] = [
      ['crossSizeMm', 'cross size (mm)'],
      ['targetSphereRadiusMm', 'target sphere (mm)'],
      ['rotationSphereRadiusMm', 'rotation sphere (mm)'],
      ['projectionLineLengthMm', 'projection line (mm)'],
      ['ringTubeRadiusMm', 'ring tube (mm)'],
    ];
    for (const [key, labelText] of fields) {
      const row = el('label', 'setting', this.settingsPanel);
      const span = el('span', '', row);
      span.textContent = labelText;
      const input = document.createElement('input');
      input.type = 'number';
      input.step = '0.1';
      input.min = '0.1';
      input.value = String(this.settings[key]);
      input.addEventListener('change', () => {
        const parsed = Number(input.value);
        if (Number.isFinite(parsed) && parsed > 0) {
          this.settings[key] = parsed;
          if (this.onSettingsChanged) this.onSettingsChanged();
        }
      });
      row.appendChild(input);
    }
  }

  showGuidance(g: GuidancePayload): void {
    this.lastGuidanceRaw = g;
    this.renderReadout();
  }

  showTwoRing(r: TwoRingPayload): void {
    this.lastTwoRingRaw = r;
    this.renderReadout();
  }

  private renderReadout(): void {
    const lines: string[] = [];
    const g = this.lastGuidanceRaw;
    const r = this.lastTwoRingRaw;
    if (this.uiMode === 'mruct' && g) {
      lines.push(`tip error ${g.tip_error_mm.toFixed(2)} mm`);
      lines.push(`rotation ${g.rotation_error_deg.toFixed(1)} deg`);
      lines.push(`depth ${(g.depth_fraction * 100).toFixed(0)}%`);
      lines.push(`mode ${g.mode}`);
    } else if (this.uiMode === 'two_ring' && r) {
      lines.push(`entry ring ${r.entry_ring_radius_mm.toFixed(2)} mm`);
      lines.push(`end ring ${r.end_ring_radius_mm.toFixed(2)} mm`);
    }
    this.readout.textContent = lines.join('\n');
  }

  setUiMode(mode: UiMode): void {
    this.uiMode = mode;
    this.modeButton.textContent = `display: ${mode}`;
    this.renderReadout();
  }

  showError(e: ErrorPayload): void {
    const toast = el('div', 'toast', this.toastBox);
    toast.textContent = `${e.code}: ${e.detail}`;
    setTimeout(() => {
      if (toast.parentElement) toast.parentElement.removeChild(toast);
    }, TOAST_MS);
  }

  setConnected(connected: boolean): void {
    this.banner.style.display = connected ? 'none' : 'block';
  }
}
